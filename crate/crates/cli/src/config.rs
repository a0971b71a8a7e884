//! Run configuration: a flat `key = value` file with dotted section prefixes.
//!
//! ```text
//! # kernels
//! cluster = se(1.0, 1.0)
//! structure.layer0 = se(1.0, 1.0)
//! structure.layer1 = white(1.0)
//! structure.layer1.scope = group
//! optimizer.mode = conjugate
//! seed = 7
//! ```
//!
//! Kernel expressions are sums (`+`) of `se(variance, lengthscale)`,
//! `white(noise)` and `periodic(variance, lengthscale, period)`. A layer
//! scope is `group` or the name of a design level such as `replicate`.
//! Every key is optional; unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use hgpclust_core::hgp::MAX_LAYERS;
use hgpclust_core::pipeline::FitConfig;
use hgpclust_core::{Design, Hypers, KernelSpec, Layer, Mode, Scope, StructureSpec};

use crate::error::{invalid, CliError, Result};

const SCALAR_KEYS: &[&str] = &[
    "cluster",
    "alpha",
    "k_init",
    "seed",
    "move_rounds",
    "prune_threshold",
    "init_heuristics",
    "hyper_perturbation",
    "optimizer.mode",
    "optimizer.tol",
    "optimizer.max_iters",
    "optimizer.restart_every",
    "optimizer.max_beta",
    "schedule.vb_iters_per_phase",
    "schedule.hyper_steps_per_phase",
    "schedule.phases",
    "output.grid_points",
    "predict.margin",
    "compare.restarts",
    "compare.modes",
    "compare.target_slack",
];

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cluster: KernelSpec,
    /// Layer kernels with their scope names, resolved against the data.
    pub layers: Vec<(KernelSpec, String)>,
    pub fit: FitConfig,
    /// Points of the posterior grid written to a bundle.
    pub grid_points: usize,
    /// Allowed extrapolation, as a fraction of the time span on each side.
    pub margin: f64,
    pub restarts: usize,
    pub modes: Vec<Mode>,
    pub target_slack: f64,
    /// The parsed key/value pairs, for the bundle manifest.
    pub entries: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cluster = KernelSpec::squared_exponential(1.0, 1.0);
        let layers = vec![
            (KernelSpec::squared_exponential(1.0, 1.0), "group".to_string()),
            (KernelSpec::white_noise(1.0), "group".to_string()),
        ];
        let hypers = Hypers {
            cluster: cluster.clone(),
            structure: StructureSpec::new(layers.iter().map(|(k, _)| Layer::group(k.clone())).collect()),
        };
        RunConfig {
            cluster,
            layers,
            fit: FitConfig::new(hypers),
            grid_points: 50,
            margin: 0.5,
            restarts: 20,
            modes: vec![Mode::Steepest, Mode::Conjugate],
            target_slack: 1.0,
            entries: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {lineno}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !known_key(key) {
                return Err(invalid(format!("line {lineno}: unknown key `{key}`")));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(invalid(format!("line {lineno}: key `{key}` given twice")));
            }
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        let get = |k: &str| entries.get(k).map(String::as_str);

        if let Some(v) = get("cluster") {
            c.cluster = parse_kernel(v).map_err(|e| invalid(format!("cluster: {e}")))?;
        }
        if entries.keys().any(|k| k.starts_with("structure.")) {
            c.layers.clear();
            for i in 0..MAX_LAYERS {
                let key = format!("structure.layer{i}");
                match get(&key) {
                    Some(v) => {
                        let kernel = parse_kernel(v).map_err(|e| invalid(format!("{key}: {e}")))?;
                        let scope = get(&format!("{key}.scope")).unwrap_or("group").to_string();
                        c.layers.push((kernel, scope));
                    }
                    None => {
                        if entries.keys().any(|k| k.starts_with(&format!("{key}.")))
                            || (i + 1..MAX_LAYERS).any(|j| entries.contains_key(&format!("structure.layer{j}")))
                        {
                            return Err(invalid(format!("{key} is missing; layers must be numbered from 0")));
                        }
                        break;
                    }
                }
            }
        }

        let f = &mut c.fit;
        set(&mut f.alpha, get("alpha"), "alpha")?;
        set(&mut f.k_init, get("k_init"), "k_init")?;
        set(&mut f.seed, get("seed"), "seed")?;
        set(&mut f.move_rounds, get("move_rounds"), "move_rounds")?;
        set(&mut f.prune_threshold, get("prune_threshold"), "prune_threshold")?;
        set(&mut f.init_heuristics, get("init_heuristics"), "init_heuristics")?;
        if let Some(v) = get("hyper_perturbation") {
            f.hyper_perturbation = match v {
                "none" => None,
                v => Some(parse_value(v, "hyper_perturbation")?),
            };
        }
        if let Some(v) = get("optimizer.mode") {
            f.optimizer.mode = parse_mode(v)?;
        }
        set(&mut f.optimizer.tol, get("optimizer.tol"), "optimizer.tol")?;
        set(&mut f.optimizer.max_iters, get("optimizer.max_iters"), "optimizer.max_iters")?;
        if let Some(v) = get("optimizer.restart_every") {
            f.optimizer.restart.every = match v {
                "none" => None,
                v => Some(parse_value(v, "optimizer.restart_every")?),
            };
        }
        if let Some(v) = get("optimizer.max_beta") {
            f.optimizer.restart.max_beta = match v {
                "none" => None,
                v => Some(parse_value(v, "optimizer.max_beta")?),
            };
        }
        let s = &mut f.schedule;
        set(&mut s.vb_iters_per_phase, get("schedule.vb_iters_per_phase"), "schedule.vb_iters_per_phase")?;
        set(&mut s.hyper_steps_per_phase, get("schedule.hyper_steps_per_phase"), "schedule.hyper_steps_per_phase")?;
        set(&mut s.phases, get("schedule.phases"), "schedule.phases")?;

        set(&mut c.grid_points, get("output.grid_points"), "output.grid_points")?;
        set(&mut c.margin, get("predict.margin"), "predict.margin")?;
        set(&mut c.restarts, get("compare.restarts"), "compare.restarts")?;
        set(&mut c.target_slack, get("compare.target_slack"), "compare.target_slack")?;
        if let Some(v) = get("compare.modes") {
            c.modes = v.split(',').map(|m| parse_mode(m.trim())).collect::<Result<_>>()?;
        }
        c.entries = entries;
        c.validate()?;
        Ok(c)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("at least one structure layer is required"));
        }
        self.cluster.validate()?;
        for (k, _) in &self.layers {
            k.validate()?;
        }
        self.fit.validate()?;
        if self.grid_points < 2 {
            return Err(invalid("output.grid_points must be >= 2"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(invalid("predict.margin must be >= 0"));
        }
        if self.restarts == 0 {
            return Err(invalid("compare.restarts must be >= 1"));
        }
        if self.modes.is_empty() {
            return Err(invalid("compare.modes is empty"));
        }
        if !(self.target_slack >= 0.0 && self.target_slack.is_finite()) {
            return Err(invalid("compare.target_slack must be >= 0"));
        }
        Ok(())
    }

    /// The fit configuration with layer scopes resolved against `design`.
    pub fn fit_config(&self, design: &Design) -> Result<FitConfig> {
        let layers = self
            .layers
            .iter()
            .map(|(k, scope)| Ok(Layer { kernel: k.clone(), scope: resolve_scope(scope, design)? }))
            .collect::<Result<Vec<_>>>()?;
        let hypers = Hypers {
            cluster: self.cluster.clone(),
            structure: StructureSpec::new(layers),
        };
        hypers.validate(design)?;
        Ok(FitConfig {
            hypers,
            ..self.fit.clone()
        })
    }
}

fn known_key(key: &str) -> bool {
    if SCALAR_KEYS.contains(&key) {
        return true;
    }
    let Some(rest) = key.strip_prefix("structure.layer") else {
        return false;
    };
    let (index, suffix) = match rest.split_once('.') {
        Some((i, s)) => (i, Some(s)),
        None => (rest, None),
    };
    matches!(index.parse::<usize>(), Ok(i) if i < MAX_LAYERS && index == i.to_string())
        && matches!(suffix, None | Some("scope"))
}

fn set<T: FromStr>(slot: &mut T, value: Option<&str>, key: &str) -> Result<()> {
    if let Some(v) = value {
        *slot = parse_value(v, key)?;
    }
    Ok(())
}

fn parse_value<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: cannot parse `{v}`")))
}

fn parse_mode(v: &str) -> Result<Mode> {
    match v {
        "steepest" => Ok(Mode::Steepest),
        "conjugate" => Ok(Mode::Conjugate),
        _ => Err(invalid(format!("unknown optimizer mode `{v}` (steepest or conjugate)"))),
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Steepest => "steepest",
        Mode::Conjugate => "conjugate",
    }
}

fn resolve_scope(name: &str, design: &Design) -> Result<Scope> {
    if name == "group" {
        return Ok(Scope::Group);
    }
    design
        .levels
        .iter()
        .position(|l| l.name == name)
        .map(Scope::Level)
        .ok_or_else(|| invalid(format!("layer scope `{name}` is not `group` or a design level of the data")))
}

/// Parses a kernel expression such as `se(1, 0.5) + white(0.1)`.
pub fn parse_kernel(expr: &str) -> std::result::Result<KernelSpec, String> {
    let terms = expr
        .split('+')
        .map(|t| parse_term(t.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let k = if terms.len() == 1 {
        terms.into_iter().next().unwrap()
    } else {
        KernelSpec::sum(terms)
    };
    k.validate().map_err(|e| e.to_string())?;
    Ok(k)
}

fn parse_term(term: &str) -> std::result::Result<KernelSpec, String> {
    let (name, rest) = term
        .split_once('(')
        .ok_or_else(|| format!("expected `name(args)`, got `{term}`"))?;
    let args = rest
        .strip_suffix(')')
        .ok_or_else(|| format!("missing `)` in `{term}`"))?;
    let values = args
        .split(',')
        .map(|a| a.trim().parse::<f64>().map_err(|_| format!("bad number `{}` in `{term}`", a.trim())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let want = |n: usize| {
        if values.len() == n {
            Ok(())
        } else {
            Err(format!("`{}` takes {n} arguments, got {}", name.trim(), values.len()))
        }
    };
    match name.trim() {
        "se" | "squared_exponential" => {
            want(2)?;
            Ok(KernelSpec::squared_exponential(values[0], values[1]))
        }
        "white" | "white_noise" => {
            want(1)?;
            Ok(KernelSpec::white_noise(values[0]))
        }
        "periodic" => {
            want(3)?;
            Ok(KernelSpec::periodic(values[0], values[1], values[2]))
        }
        other => Err(format!("unknown kernel `{other}`")),
    }
}

/// The expression syntax of [`parse_kernel`] for `k`.
pub fn kernel_expr(k: &KernelSpec) -> String {
    let mut s = String::new();
    match k {
        KernelSpec::SquaredExponential { variance, lengthscale } => {
            write!(s, "se({variance}, {lengthscale})").unwrap();
        }
        KernelSpec::WhiteNoise { noise } => write!(s, "white({noise})").unwrap(),
        KernelSpec::Periodic {
            variance,
            lengthscale,
            period,
        } => write!(s, "periodic({variance}, {lengthscale}, {period})").unwrap(),
        KernelSpec::Sum { children } => {
            let parts: Vec<String> = children.iter().map(kernel_expr).collect();
            s = parts.join(" + ");
        }
    }
    s
}
