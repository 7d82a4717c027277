//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, strict unknown-key checking, per-problem defaults, and an echo
//! serialization that round-trips bitwise.

use crate::model::{lq_to_general, ControlProblem, LQProblem};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key '{key}'")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Relaxed,
    Classical,
    ClassicalRestart,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Relaxed => "relaxed",
            Mode::Classical => "classical",
            Mode::ClassicalRestart => "classical_restart",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Quadratic,
    Grid,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Quadratic => "quadratic",
            Backend::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Zero,
    Rollout,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Zero => "zero",
            InitKind::Rollout => "rollout",
        })
    }
}

/// Builtin problems plus a customizable linear-quadratic family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Mild linear-quadratic instance: A=-1, B=1, C=0, M=N=1, P=1, Q=0.
    LqDefault,
    /// Stiff linear-quadratic instance with strong contraction:
    /// A=-10, B=1, C=0.5, M=1e4, N=10, P=Q=0.
    LqStiff,
    /// Double-well control payoff -(u^2-1)^2 + 0.3u with state coupling
    /// -x^2/2, drift -x + 2 tanh(u/2), constant diffusion 0.5; the classical
    /// iteration stalls on the lower peak, exercising sequential restarts.
    DoubleWell,
    /// Linear-quadratic with every coefficient taken from lq_* keys.
    LqCustom,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::LqDefault => "lq_default",
            ProblemKind::LqStiff => "lq_stiff",
            ProblemKind::DoubleWell => "double_well",
            ProblemKind::LqCustom => "lq_custom",
        })
    }
}

pub const KNOWN_DIAGNOSTICS: &[&str] = &[
    "monotonicity",
    "hjb",
    "gibbs",
    "stationarity",
    "quad_fit",
    "gradient_residual",
    "restart",
    "contraction",
    "w2_bound",
    "mc1",
    "mc2",
    "mc3",
    "mc4",
    "mc5",
    "mc6",
];

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "backend",
    "problem",
    "lambda",
    "beta",
    "lq_a",
    "lq_b",
    "lq_c",
    "lq_m",
    "lq_n",
    "lq_p",
    "lq_q",
    "dtau",
    "tau_max",
    "particles",
    "x_min",
    "x_max",
    "nodes",
    "u_min",
    "u_max",
    "u_quad_nodes",
    "master_seed",
    "snapshot_cadence",
    "init",
    "out_dir",
    "dump_particles",
    "diagnostics",
    "mu0",
    "var0",
    "a1_offset",
    "mu_offset",
    "rollout_paths",
    "rollout_dt",
    "rollout_horizon",
    "tol_restart",
    "restart_max_rounds",
    "round_tau",
    "eps_bar",
    "eps_lower",
    "blowup_guard",
    "probes",
];

/// Fully resolved experiment description. Every field has a per-problem
/// default, so a config file only needs the keys it wants to change.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub backend: Backend,
    pub problem: ProblemKind,
    /// Linear-quadratic coefficients (A, B, C, M, N, P, Q); present for the
    /// LQ problems, None for double_well.
    pub lq: Option<LqParams>,
    pub lambda: f64,
    pub beta: f64,
    pub dtau: f64,
    pub tau_max: f64,
    pub particles: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub nodes: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub u_quad_nodes: usize,
    pub master_seed: u64,
    pub snapshot_cadence: f64,
    pub init: InitKind,
    pub out_dir: PathBuf,
    pub dump_particles: bool,
    pub diagnostics: BTreeSet<String>,
    /// Initial policy mean (relaxed) or initial control level (classical).
    pub mu0: f64,
    /// Initial policy variance (relaxed modes).
    pub var0: f64,
    /// Compare runs: offset applied to the second run's linear value
    /// coefficient (quadratic backend) or value slope (grid backend).
    pub a1_offset: f64,
    /// Compare runs: offset applied to the second run's initial policy mean.
    pub mu_offset: f64,
    pub rollout_paths: usize,
    pub rollout_dt: f64,
    pub rollout_horizon: f64,
    /// Hamiltonian improvement needed before a sequential restart fires.
    pub tol_restart: f64,
    pub restart_max_rounds: usize,
    /// Iteration time allotted to each restart round.
    pub round_tau: f64,
    pub eps_bar: f64,
    pub eps_lower: f64,
    pub blowup_guard: f64,
    /// Probe states for monotonicity and compare diagnostics; snapped to
    /// grid nodes by the grid backend.
    pub probes: Vec<f64>,
}

/// The seven linear-quadratic coefficients, without the shared discount and
/// temperature (those live on the config itself).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub m: f64,
    pub n: f64,
    pub p: f64,
    pub q: f64,
}

impl ExperimentConfig {
    /// Defaults for a builtin problem; config keys override individual fields.
    pub fn builtin(kind: ProblemKind) -> Self {
        let mut cfg = Self {
            mode: Mode::Relaxed,
            backend: Backend::Quadratic,
            problem: kind,
            lq: Some(LqParams {
                a: -1.0,
                b: 1.0,
                c: 0.0,
                m: 1.0,
                n: 1.0,
                p: 1.0,
                q: 0.0,
            }),
            lambda: 0.25,
            beta: 1.0,
            dtau: 1e-3,
            tau_max: 50.0,
            particles: 20_000,
            x_min: -3.0,
            x_max: 3.0,
            nodes: 101,
            u_min: -10.0,
            u_max: 10.0,
            u_quad_nodes: 2001,
            master_seed: 12345,
            snapshot_cadence: 0.1,
            init: InitKind::Zero,
            out_dir: PathBuf::from("out"),
            dump_particles: false,
            // Monotonicity is not on by default: the guarantee needs the
            // rollout initialization, while the default start is v = 0.
            diagnostics: ["hjb"].iter().map(|s| s.to_string()).collect(),
            mu0: 0.0,
            var0: 0.25,
            a1_offset: 0.0,
            mu_offset: 0.0,
            rollout_paths: 2000,
            rollout_dt: 1e-3,
            rollout_horizon: 30.0,
            tol_restart: 1e-3,
            restart_max_rounds: 3,
            round_tau: 6.0,
            eps_bar: 0.01,
            eps_lower: 0.01,
            blowup_guard: 1e8,
            probes: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
        };
        match kind {
            ProblemKind::LqDefault | ProblemKind::LqCustom => {}
            ProblemKind::LqStiff => {
                cfg.lq = Some(LqParams {
                    a: -10.0,
                    b: 1.0,
                    c: 0.5,
                    m: 1e4,
                    n: 10.0,
                    p: 0.0,
                    q: 0.0,
                });
                // The coefficient flow relaxes on the 1/N scale; resolve it.
                cfg.dtau = 2e-4;
                cfg.tau_max = 0.1;
                cfg.snapshot_cadence = 5e-3;
                cfg.var0 = 0.025;
                cfg.x_min = -0.25;
                cfg.x_max = 0.25;
                cfg.probes = vec![-0.2, -0.1, 0.0, 0.1, 0.2];
            }
            ProblemKind::DoubleWell => {
                cfg.lq = None;
                cfg.mode = Mode::ClassicalRestart;
                cfg.backend = Backend::Grid;
                cfg.lambda = 0.0;
                cfg.u_min = -2.5;
                cfg.u_max = 2.5;
                cfg.u_quad_nodes = 1001;
                // Value increase along the iteration needs a consistent
                // start: the value of the initial control, not zero.
                cfg.init = InitKind::Rollout;
                cfg.rollout_paths = 400;
                cfg.rollout_dt = 2e-3;
                cfg.rollout_horizon = 20.0;
                // Iteration budget for restart_max_rounds rounds of round_tau.
                cfg.tau_max = 18.0;
                cfg.mu0 = -1.0;
                cfg.diagnostics = ["monotonicity", "restart"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
            }
        }
        cfg
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let items = tokenize(text)?;
        let mut seen = BTreeSet::new();
        for item in &items {
            if !KNOWN_KEYS.contains(&item.key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    line: item.line,
                    key: item.key.clone(),
                });
            }
            if !seen.insert(item.key.clone()) {
                return Err(ConfigError::DuplicateKey {
                    line: item.line,
                    key: item.key.clone(),
                });
            }
        }
        let kind = match items.iter().find(|i| i.key == "problem") {
            Some(item) => parse_problem(item)?,
            None => ProblemKind::LqDefault,
        };
        let mut cfg = Self::builtin(kind);
        for item in &items {
            if item.key != "problem" {
                cfg.apply(item)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, item: &RawItem) -> Result<(), ConfigError> {
        let RawItem { line, key, value } = item;
        let (line, key) = (*line, key.as_str());
        match key {
            "mode" => {
                self.mode = match value.as_str() {
                    "relaxed" => Mode::Relaxed,
                    "classical" => Mode::Classical,
                    "classical_restart" => Mode::ClassicalRestart,
                    other => {
                        return Err(invalid(
                            line,
                            key,
                            format!("'{other}' is not relaxed|classical|classical_restart"),
                        ))
                    }
                }
            }
            "backend" => {
                self.backend = match value.as_str() {
                    "quadratic" => Backend::Quadratic,
                    "grid" => Backend::Grid,
                    other => {
                        return Err(invalid(line, key, format!("'{other}' is not quadratic|grid")))
                    }
                }
            }
            "lambda" => self.lambda = parse_f64(line, key, value)?,
            "beta" => self.beta = parse_f64(line, key, value)?,
            "lq_a" | "lq_b" | "lq_c" | "lq_m" | "lq_n" | "lq_p" | "lq_q" => {
                let x = parse_f64(line, key, value)?;
                let Some(lq) = self.lq.as_mut() else {
                    return Err(invalid(
                        line,
                        key,
                        "linear-quadratic coefficients do not apply to this problem".into(),
                    ));
                };
                match key {
                    "lq_a" => lq.a = x,
                    "lq_b" => lq.b = x,
                    "lq_c" => lq.c = x,
                    "lq_m" => lq.m = x,
                    "lq_n" => lq.n = x,
                    "lq_p" => lq.p = x,
                    _ => lq.q = x,
                }
            }
            "dtau" => self.dtau = parse_f64(line, key, value)?,
            "tau_max" => self.tau_max = parse_f64(line, key, value)?,
            "particles" => self.particles = parse_usize(line, key, value)?,
            "x_min" => self.x_min = parse_f64(line, key, value)?,
            "x_max" => self.x_max = parse_f64(line, key, value)?,
            "nodes" => self.nodes = parse_usize(line, key, value)?,
            "u_min" => self.u_min = parse_f64(line, key, value)?,
            "u_max" => self.u_max = parse_f64(line, key, value)?,
            "u_quad_nodes" => self.u_quad_nodes = parse_usize(line, key, value)?,
            "master_seed" => {
                self.master_seed = value
                    .parse::<u64>()
                    .map_err(|e| invalid(line, key, e.to_string()))?
            }
            "snapshot_cadence" => self.snapshot_cadence = parse_f64(line, key, value)?,
            "init" => {
                self.init = match value.as_str() {
                    "zero" => InitKind::Zero,
                    "rollout" => InitKind::Rollout,
                    other => return Err(invalid(line, key, format!("'{other}' is not zero|rollout"))),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dump_particles" => self.dump_particles = parse_bool(line, key, value)?,
            "diagnostics" => {
                let mut set = BTreeSet::new();
                if value != "none" {
                    for name in value.split(',').map(str::trim) {
                        if name == "all" {
                            set.extend(KNOWN_DIAGNOSTICS.iter().map(|s| s.to_string()));
                        } else if KNOWN_DIAGNOSTICS.contains(&name) {
                            set.insert(name.to_string());
                        } else {
                            return Err(invalid(
                                line,
                                key,
                                format!("'{name}' is not a known diagnostic"),
                            ));
                        }
                    }
                }
                self.diagnostics = set;
            }
            "mu0" => self.mu0 = parse_f64(line, key, value)?,
            "var0" => self.var0 = parse_f64(line, key, value)?,
            "a1_offset" => self.a1_offset = parse_f64(line, key, value)?,
            "mu_offset" => self.mu_offset = parse_f64(line, key, value)?,
            "rollout_paths" => self.rollout_paths = parse_usize(line, key, value)?,
            "rollout_dt" => self.rollout_dt = parse_f64(line, key, value)?,
            "rollout_horizon" => self.rollout_horizon = parse_f64(line, key, value)?,
            "tol_restart" => self.tol_restart = parse_f64(line, key, value)?,
            "restart_max_rounds" => self.restart_max_rounds = parse_usize(line, key, value)?,
            "round_tau" => self.round_tau = parse_f64(line, key, value)?,
            "eps_bar" => self.eps_bar = parse_f64(line, key, value)?,
            "eps_lower" => self.eps_lower = parse_f64(line, key, value)?,
            "blowup_guard" => self.blowup_guard = parse_f64(line, key, value)?,
            "probes" => {
                let mut probes = Vec::new();
                for piece in value.split(',').map(str::trim) {
                    probes.push(parse_f64(line, key, piece)?);
                }
                if probes.is_empty() {
                    return Err(invalid(line, key, "needs at least one probe state".into()));
                }
                self.probes = probes;
            }
            _ => unreachable!("unknown keys are rejected before apply"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !self.dtau.is_finite() || self.dtau <= 0.0 {
            return fail(format!("dtau must be positive, got {}", self.dtau));
        }
        if self.tau_max < self.dtau {
            return fail(format!(
                "tau_max ({}) must be at least one step dtau ({})",
                self.tau_max, self.dtau
            ));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        match self.mode {
            Mode::Relaxed => {
                if !self.lambda.is_finite() || self.lambda <= 0.0 {
                    return fail("relaxed mode requires lambda > 0".into());
                }
                if self.particles < 2 {
                    return fail(format!(
                        "relaxed mode needs at least 2 particles, got {}",
                        self.particles
                    ));
                }
            }
            Mode::Classical | Mode::ClassicalRestart => {
                if self.lambda != 0.0 {
                    return fail(format!(
                        "classical modes run at zero temperature; set lambda = 0 (got {})",
                        self.lambda
                    ));
                }
            }
        }
        if self.backend == Backend::Quadratic && self.lq.is_none() {
            return fail("the quadratic backend requires a linear-quadratic problem".into());
        }
        if self.mode == Mode::ClassicalRestart && self.backend != Backend::Grid {
            return fail("classical_restart requires the grid backend".into());
        }
        let cadence_steps = (self.snapshot_cadence / self.dtau).round();
        if !self.snapshot_cadence.is_finite()
            || self.snapshot_cadence <= 0.0
            || cadence_steps < 1.0
            || (cadence_steps * self.dtau - self.snapshot_cadence).abs()
                > 1e-9 * self.snapshot_cadence.max(1.0)
        {
            return fail(format!(
                "snapshot_cadence ({}) must be a positive multiple of dtau ({})",
                self.snapshot_cadence, self.dtau
            ));
        }
        if self.x_max <= self.x_min {
            return fail(format!("x_max ({}) must exceed x_min ({})", self.x_max, self.x_min));
        }
        if self.u_max <= self.u_min {
            return fail(format!("u_max ({}) must exceed u_min ({})", self.u_max, self.u_min));
        }
        if self.nodes < 5 {
            return fail(format!("nodes must be at least 5, got {}", self.nodes));
        }
        if self.u_quad_nodes < 2 {
            return fail(format!("u_quad_nodes must be at least 2, got {}", self.u_quad_nodes));
        }
        if self.var0 < 0.0 {
            return fail(format!("var0 must be non-negative, got {}", self.var0));
        }
        if !self.blowup_guard.is_finite() || self.blowup_guard <= 0.0 {
            return fail(format!("blowup_guard must be positive, got {}", self.blowup_guard));
        }
        if self.rollout_paths < 100 {
            return fail(format!(
                "rollout_paths must be at least 100, got {}",
                self.rollout_paths
            ));
        }
        if !self.rollout_dt.is_finite()
            || self.rollout_dt <= 0.0
            || !self.rollout_horizon.is_finite()
            || self.rollout_horizon <= 0.0
        {
            return fail("rollout_dt and rollout_horizon must be positive".into());
        }
        for name in &self.diagnostics {
            if !KNOWN_DIAGNOSTICS.contains(&name.as_str()) {
                return fail(format!("'{name}' is not a known diagnostic"));
            }
        }
        let prob = self.build_problem().map_err(|e| match e {
            ConfigError::Invalid(msg) => ConfigError::Invalid(msg),
            other => other,
        })?;
        if self.backend == Backend::Grid {
            // Explicit Euler diffusion stability on the value grid.
            let h = (self.x_max - self.x_min) / (self.nodes - 1) as f64;
            let sigma_max = [self.x_min, self.x_max]
                .iter()
                .map(|&x| (prob.diffusion)(x, 0.0).abs())
                .fold(0.0f64, f64::max);
            if sigma_max > 0.0 && self.dtau * sigma_max * sigma_max > h * h {
                return fail(format!(
                    "dtau ({}) exceeds the diffusion stability limit h^2/sigma^2 = {:.3e}",
                    self.dtau,
                    h * h / (sigma_max * sigma_max)
                ));
            }
        }
        Ok(())
    }

    /// The LQ coefficients joined with the shared discount and temperature.
    pub fn lq_problem(&self) -> Option<LQProblem> {
        self.lq.map(|p| LQProblem {
            a: p.a,
            b: p.b,
            c: p.c,
            m: p.m,
            n: p.n,
            p: p.p,
            q: p.q,
            beta: self.beta,
            lambda: self.lambda,
        })
    }

    /// Instantiates the configured problem.
    pub fn build_problem(&self) -> Result<ControlProblem, ConfigError> {
        match self.problem {
            ProblemKind::LqDefault | ProblemKind::LqStiff | ProblemKind::LqCustom => {
                let lq = self
                    .lq_problem()
                    .expect("LQ problems always carry coefficients");
                lq.validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let mut prob = lq_to_general(lq);
                prob.u_domain = (self.u_min, self.u_max);
                Ok(prob)
            }
            ProblemKind::DoubleWell => Ok(double_well_problem(
                self.beta,
                self.lambda,
                (self.u_min, self.u_max),
            )),
        }
    }

    /// Serializes every resolved key; parsing the result reproduces `self`
    /// exactly (reals carry 17 significant digits).
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let f = |x: f64| format!("{x:.16e}");
        kv(&mut s, "problem", self.problem.to_string());
        kv(&mut s, "mode", self.mode.to_string());
        kv(&mut s, "backend", self.backend.to_string());
        kv(&mut s, "lambda", f(self.lambda));
        kv(&mut s, "beta", f(self.beta));
        if let Some(lq) = self.lq {
            kv(&mut s, "lq_a", f(lq.a));
            kv(&mut s, "lq_b", f(lq.b));
            kv(&mut s, "lq_c", f(lq.c));
            kv(&mut s, "lq_m", f(lq.m));
            kv(&mut s, "lq_n", f(lq.n));
            kv(&mut s, "lq_p", f(lq.p));
            kv(&mut s, "lq_q", f(lq.q));
        }
        kv(&mut s, "dtau", f(self.dtau));
        kv(&mut s, "tau_max", f(self.tau_max));
        kv(&mut s, "particles", self.particles.to_string());
        kv(&mut s, "x_min", f(self.x_min));
        kv(&mut s, "x_max", f(self.x_max));
        kv(&mut s, "nodes", self.nodes.to_string());
        kv(&mut s, "u_min", f(self.u_min));
        kv(&mut s, "u_max", f(self.u_max));
        kv(&mut s, "u_quad_nodes", self.u_quad_nodes.to_string());
        kv(&mut s, "master_seed", self.master_seed.to_string());
        kv(&mut s, "snapshot_cadence", f(self.snapshot_cadence));
        kv(&mut s, "init", self.init.to_string());
        kv(&mut s, "out_dir", self.out_dir.display().to_string());
        kv(&mut s, "dump_particles", self.dump_particles.to_string());
        let diag = if self.diagnostics.is_empty() {
            "none".to_string()
        } else {
            self.diagnostics
                .iter()
                .cloned()
                .collect::<Vec<_>>()
                .join(",")
        };
        kv(&mut s, "diagnostics", diag);
        kv(&mut s, "mu0", f(self.mu0));
        kv(&mut s, "var0", f(self.var0));
        kv(&mut s, "a1_offset", f(self.a1_offset));
        kv(&mut s, "mu_offset", f(self.mu_offset));
        kv(&mut s, "rollout_paths", self.rollout_paths.to_string());
        kv(&mut s, "rollout_dt", f(self.rollout_dt));
        kv(&mut s, "rollout_horizon", f(self.rollout_horizon));
        kv(&mut s, "tol_restart", f(self.tol_restart));
        kv(&mut s, "restart_max_rounds", self.restart_max_rounds.to_string());
        kv(&mut s, "round_tau", f(self.round_tau));
        kv(&mut s, "eps_bar", f(self.eps_bar));
        kv(&mut s, "eps_lower", f(self.eps_lower));
        kv(&mut s, "blowup_guard", f(self.blowup_guard));
        let probes = self
            .probes
            .iter()
            .map(|&p| format!("{p:.16e}"))
            .collect::<Vec<_>>()
            .join(",");
        kv(&mut s, "probes", probes);
        s
    }
}

/// Smoothly saturated double-well problem used by the restart demonstration.
pub fn double_well_problem(beta: f64, lambda: f64, u_domain: (f64, f64)) -> ControlProblem {
    ControlProblem {
        drift: Box::new(|x, u| -x + 2.0 * (u / 2.0).tanh()),
        diffusion: Box::new(|_x, _u| 0.5),
        payoff: Box::new(|x, u| {
            let w = u * u - 1.0;
            -w * w + 0.3 * u - 0.5 * x * x
        }),
        drift_grad_u: Box::new(|_x, u| {
            let c = (u / 2.0).cosh();
            1.0 / (c * c)
        }),
        diffusion_grad_u: Box::new(|_x, _u| 0.0),
        payoff_grad_u: Box::new(|_x, u| -4.0 * u * (u * u - 1.0) + 0.3),
        discount: beta,
        temperature: lambda,
        u_domain,
        state_dim: 1,
        control_dim: 1,
        lq: None,
    }
}

struct RawItem {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<RawItem>, ConfigError> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((k, v)) = stripped.split_once('=') else {
            return Err(ConfigError::Malformed {
                line,
                text: stripped.to_string(),
            });
        };
        let key = k.trim();
        let value = v.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Malformed {
                line,
                text: stripped.to_string(),
            });
        }
        items.push(RawItem {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(items)
}

fn parse_problem(item: &RawItem) -> Result<ProblemKind, ConfigError> {
    match item.value.as_str() {
        "lq_default" => Ok(ProblemKind::LqDefault),
        "lq_stiff" => Ok(ProblemKind::LqStiff),
        "double_well" => Ok(ProblemKind::DoubleWell),
        "lq_custom" => Ok(ProblemKind::LqCustom),
        other => Err(invalid(
            item.line,
            "problem",
            format!("'{other}' is not lq_default|lq_stiff|double_well|lq_custom"),
        )),
    }
}

fn invalid(line: usize, key: &str, reason: String) -> ConfigError {
    ConfigError::InvalidValue {
        line,
        key: key.to_string(),
        reason,
    }
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64, ConfigError> {
    let x: f64 = value.parse().map_err(|e: std::num::ParseFloatError| {
        invalid(line, key, e.to_string())
    })?;
    if !x.is_finite() {
        return Err(invalid(line, key, "must be finite".into()));
    }
    Ok(x)
}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize, ConfigError> {
    value
        .parse::<usize>()
        .map_err(|e| invalid(line, key, e.to_string()))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(invalid(line, key, format!("'{other}' is not true|false"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = ExperimentConfig::from_str_checked("").unwrap();
        assert_eq!(cfg.problem, ProblemKind::LqDefault);
        assert_eq!(cfg.mode, Mode::Relaxed);
        assert_eq!(cfg.particles, 20_000);
        for kind in [
            ProblemKind::LqDefault,
            ProblemKind::LqStiff,
            ProblemKind::DoubleWell,
            ProblemKind::LqCustom,
        ] {
            ExperimentConfig::builtin(kind).validate().unwrap();
        }
    }

    #[test]
    fn overrides_comments_and_order() {
        let text = "
            # comment line
            tau_max = 2.0   # trailing comment
            problem = lq_custom
            lq_m = 0.5
            dtau = 0.002
        ";
        let cfg = ExperimentConfig::from_str_checked(text).unwrap();
        assert_eq!(cfg.problem, ProblemKind::LqCustom);
        assert_eq!(cfg.tau_max, 2.0);
        assert_eq!(cfg.dtau, 0.002);
        assert_eq!(cfg.lq.unwrap().m, 0.5);
        assert_eq!(cfg.lq.unwrap().n, 1.0);
    }

    #[test]
    fn rejects_bad_input_with_line_numbers() {
        let err = ExperimentConfig::from_str_checked("dtau = 0.001\nwibble = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, .. }), "{err}");
        let err = ExperimentConfig::from_str_checked("dtau = 1e-3\ndtau = 1e-4\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));
        let err = ExperimentConfig::from_str_checked("this is not a key value\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 1, .. }));
        let err = ExperimentConfig::from_str_checked("dtau = fast\n").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { line: 1, .. }));
        let err = ExperimentConfig::from_str_checked("problem = double_well\nlq_m = 2\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { line: 2, .. }));
    }

    #[test]
    fn semantic_validation() {
        let err = ExperimentConfig::from_str_checked("lambda = 0\n").unwrap_err();
        assert!(err.to_string().contains("relaxed mode requires lambda > 0"));
        let err = ExperimentConfig::from_str_checked("mode = classical\n").unwrap_err();
        assert!(err.to_string().contains("zero temperature"));
        assert!(ExperimentConfig::from_str_checked("mode = classical\nlambda = 0\n").is_ok());
        let err =
            ExperimentConfig::from_str_checked("snapshot_cadence = 0.0015\n").unwrap_err();
        assert!(err.to_string().contains("multiple of dtau"));
        // One-step runs are allowed: tau_max equal to dtau.
        let cfg = ExperimentConfig::from_str_checked(
            "tau_max = 1e-3\nsnapshot_cadence = 1e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.tau_max, cfg.dtau);
        let err = ExperimentConfig::from_str_checked(
            "problem = double_well\nbackend = grid\ndtau = 0.02\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("stability"), "{err}");
    }

    #[test]
    fn echo_round_trips_exactly() {
        let text = "
            problem = lq_stiff
            master_seed = 999
            probes = -0.125, 0.0, 0.125
            diagnostics = mc2,mc3,w2_bound
            a1_offset = 0.1
        ";
        let cfg = ExperimentConfig::from_str_checked(text).unwrap();
        let echoed = ExperimentConfig::from_str_checked(&cfg.echo()).unwrap();
        assert_eq!(cfg, echoed);
        let dw = ExperimentConfig::builtin(ProblemKind::DoubleWell);
        let echoed = ExperimentConfig::from_str_checked(&dw.echo()).unwrap();
        assert_eq!(dw, echoed);
    }
}
