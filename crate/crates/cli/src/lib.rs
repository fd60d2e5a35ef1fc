//! Experiment harness around `suap_core`: config handling, scene generation,
//! attacks, evaluation and method comparison.

use std::fs;
use std::path::{Path, PathBuf};

use suap_core::config::{self, Ini};
use suap_core::detector::DetectorConfig;
use suap_core::losses::LossWeights;
use suap_core::report;
use suap_core::scene::{self, FrameSequence, SceneSpec};
use suap_core::solvers::{AoExpConfig, FwNuclConfig, LoRaPgdConfig, TopK};

pub mod commands;
pub mod svg;

pub use commands::{cmd_attack, cmd_compare, cmd_detect, cmd_eval, cmd_gen_scene, EvalInput};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] suap_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 1 usage/config, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    AoExp,
    AoExpLora,
    LoraPgd,
    FwNucl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AoExp => "ao-exp",
            Method::AoExpLora => "ao-exp-lora",
            Method::LoraPgd => "lora-pgd",
            Method::FwNucl => "fw-nucl",
        }
    }

    /// Config section holding the solver settings.
    pub fn section(self) -> &'static str {
        match self {
            Method::AoExp | Method::AoExpLora => "ao_exp",
            Method::LoraPgd => "lora_pgd",
            Method::FwNucl => "fw_nucl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ao-exp" => Ok(Method::AoExp),
            "ao-exp-lora" => Ok(Method::AoExpLora),
            "lora-pgd" => Ok(Method::LoraPgd),
            "fw-nucl" => Ok(Method::FwNucl),
            other => Err(CliError::Usage(format!(
                "unknown method {other:?}, expected ao-exp, ao-exp-lora, lora-pgd or fw-nucl"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Solver {
    AoExp(AoExpConfig),
    LoraPgd(LoRaPgdConfig),
    FwNucl(FwNuclConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Scene(SceneSpec),
    FramesDir(PathBuf),
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<Method>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub iters: Option<usize>,
    pub top_k: Option<String>,
    pub rank_frac: Option<f64>,
    pub nuclear_budget: Option<String>,
    pub epsilon: Option<f64>,
    pub frames_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, ini: &mut Ini) -> Result<()> {
        if let Some(m) = self.method {
            ini.set("run", "method", m.name());
        }
        let method = run_method(ini)?;
        if let Some(v) = self.lambda1 {
            ini.set("regularizer", "lambda1", v.to_string());
        }
        if let Some(v) = self.lambda2 {
            ini.set("regularizer", "lambda2", v.to_string());
        }
        if let Some(n) = self.iters {
            ini.set(method.section(), "iterations", n.to_string());
        }
        if let Some(k) = &self.top_k {
            ini.set("ao_exp", "top_k", k.clone());
        }
        if let Some(v) = self.rank_frac {
            ini.set("lora_pgd", "rank_fraction", v.to_string());
        }
        if let Some(v) = &self.nuclear_budget {
            ini.set("lora_pgd", "nuclear_budget", v.clone());
        }
        if let Some(v) = self.epsilon {
            ini.set("fw_nucl", "epsilon", v.to_string());
        }
        if let Some(d) = &self.frames_dir {
            ini.set("run", "frames_dir", path_str(d)?);
        }
        if let Some(d) = &self.out {
            ini.set("run", "out", path_str(d)?);
        }
        if let Some(s) = self.seed {
            ini.set("run", "seed", s.to_string());
            if ini.get("scene", "seed").is_some() {
                ini.set("scene", "seed", s.to_string());
            }
        }
        Ok(())
    }
}

fn path_str(p: &Path) -> Result<String> {
    p.to_str()
        .map(str::to_string)
        .ok_or_else(|| CliError::Usage(format!("path {} is not valid UTF-8", p.display())))
}

fn run_method(ini: &Ini) -> Result<Method> {
    ini.get("run", "method").map_or(Ok(Method::AoExp), str::parse)
}

const SECTIONS: &[&str] = &["scene", "detector", "loss", "regularizer", "ao_exp", "lora_pgd", "fw_nucl", "run"];
const RUN_KEYS: &[&str] = &["method", "frames_dir", "out", "seed", "instance"];

/// Reads and parses a config file; `None` gives an empty config.
pub fn load_config(path: Option<&Path>) -> Result<Ini> {
    match path {
        None => Ok(Ini::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(config::parse_ini(&text)?)
        }
    }
}

/// Fully resolved settings of one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    pub detector: DetectorConfig,
    pub weights: LossWeights,
    pub method: Method,
    pub solver: Solver,
    pub out: PathBuf,
    pub seed: u64,
    pub instance: String,
    effective: Ini,
}

impl RunConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        for s in ini.sections() {
            if !SECTIONS.contains(&s.name.as_str()) {
                return Err(CliError::Usage(format!("unknown config section [{}]", s.name)));
            }
        }
        ini.check_keys("run", RUN_KEYS)?;
        let method = run_method(ini)?;
        let seed = ini.parse_or("run", "seed", 0u64)?;
        let out = PathBuf::from(ini.get("run", "out").unwrap_or("out"));
        let mut effective = Ini::default();

        let source = match ini.get("run", "frames_dir") {
            Some(dir) => {
                if ini.has_section("scene") {
                    return Err(CliError::Usage(
                        "give either a [scene] section or a frames directory, not both".into(),
                    ));
                }
                effective.set("run", "frames_dir", dir);
                Source::FramesDir(PathBuf::from(dir))
            }
            None => {
                let mut scene_ini = ini.clone();
                if ini.get("scene", "seed").is_none() {
                    scene_ini.set("scene", "seed", seed.to_string());
                }
                let spec = config::scene_spec(&scene_ini)?;
                config::write_scene(&mut effective, &spec);
                Source::Scene(spec)
            }
        };
        let instance = match ini.get("run", "instance") {
            Some(name) => name.to_string(),
            None => match &source {
                Source::FramesDir(d) => d
                    .file_name()
                    .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()),
                Source::Scene(_) => format!(
                    "scene-{}",
                    ini.get("scene", "seed").map_or(seed, |s| s.parse().unwrap_or(seed))
                ),
            },
        };

        let detector = config::detector_config(ini)?;
        config::write_detector(&mut effective, &detector)?;
        let weights = config::loss_weights(ini)?;
        config::write_loss_weights(&mut effective, &weights);

        let solver = match method {
            Method::AoExp | Method::AoExpLora => {
                let mut solver_ini = ini.clone();
                if method == Method::AoExpLora && ini.get("ao_exp", "top_k").is_none() {
                    solver_ini.set("ao_exp", "top_k", TopK::K(1).to_string());
                }
                let cfg = config::ao_exp_config(&solver_ini)?;
                config::write_ao_exp(&mut effective, &cfg);
                Solver::AoExp(cfg)
            }
            Method::LoraPgd => {
                let cfg = config::lora_pgd_config(ini, seed)?;
                config::write_lora_pgd(&mut effective, &cfg);
                Solver::LoraPgd(cfg)
            }
            Method::FwNucl => {
                let cfg = config::fw_nucl_config(ini)?;
                config::write_fw_nucl(&mut effective, &cfg);
                Solver::FwNucl(cfg)
            }
        };
        effective.set("run", "method", method.name());
        effective.set("run", "seed", seed.to_string());
        effective.set("run", "out", path_str(&out)?);
        effective.set("run", "instance", instance.clone());

        Ok(RunConfig {
            source,
            detector,
            weights,
            method,
            solver,
            out,
            seed,
            instance,
            effective,
        })
    }

    /// Config file (optional) plus command-line overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut ini = load_config(path)?;
        overrides.apply(&mut ini)?;
        Self::from_ini(&ini)
    }

    /// Every resolved value, suitable for re-running the command.
    pub fn effective(&self) -> &Ini {
        &self.effective
    }

    /// Hash of the effective config without the output location, so that
    /// identical runs written to different directories share a hash.
    pub fn config_hash(&self) -> String {
        let mut ini = self.effective.clone();
        ini.remove("run", "out");
        report::config_hash(&ini)
    }

    pub fn frames(&self) -> Result<FrameSequence> {
        match &self.source {
            Source::Scene(spec) => Ok(scene::generate_scene(spec)?.frames),
            Source::FramesDir(dir) => Ok(scene::load_frames(dir)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use suap_core::config::parse_ini;

    #[test]
    fn flags_override_file_values() {
        let mut ini = parse_ini("[run]\nmethod = fw-nucl\n[fw_nucl]\nepsilon = 3\niterations = 4\n").unwrap();
        let o = Overrides { epsilon: Some(7.5), iters: Some(9), ..Overrides::default() };
        o.apply(&mut ini).unwrap();
        let rc = RunConfig::from_ini(&ini).unwrap();
        assert_eq!(rc.method, Method::FwNucl);
        match rc.solver {
            Solver::FwNucl(c) => {
                assert_eq!(c.epsilon, 7.5);
                assert_eq!(c.iterations, 9);
            }
            other => panic!("unexpected solver {other:?}"),
        }
        assert_eq!(rc.effective().get("fw_nucl", "epsilon"), Some("7.5"));
    }

    #[test]
    fn lora_variant_defaults_to_top_one() {
        let ini = parse_ini("[run]\nmethod = ao-exp-lora\n").unwrap();
        let Solver::AoExp(c) = RunConfig::from_ini(&ini).unwrap().solver else { panic!() };
        assert_eq!(c.top_k, TopK::K(1));
        let ini = parse_ini("[run]\nmethod = ao-exp-lora\n[ao_exp]\ntop_k = 3\n").unwrap();
        let Solver::AoExp(c) = RunConfig::from_ini(&ini).unwrap().solver else { panic!() };
        assert_eq!(c.top_k, TopK::K(3));
    }

    #[test]
    fn exactly_one_source() {
        let ini = parse_ini("[run]\nframes_dir = x\n[scene]\nheight = 32\n").unwrap();
        assert_eq!(RunConfig::from_ini(&ini).unwrap_err().exit_code(), 1);
        let ini = parse_ini("[run]\nframes_dir = some/clip\n").unwrap();
        let rc = RunConfig::from_ini(&ini).unwrap();
        assert_eq!(rc.source, Source::FramesDir("some/clip".into()));
        assert_eq!(rc.instance, "clip");
    }

    #[test]
    fn run_seed_drives_the_scene() {
        let a = RunConfig::from_ini(&parse_ini("[run]\nseed = 4\n").unwrap()).unwrap();
        let b = RunConfig::from_ini(&parse_ini("[scene]\nseed = 4\n").unwrap()).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.instance, "scene-4");
    }

    #[test]
    fn unknown_sections_and_keys_are_rejected() {
        assert!(RunConfig::from_ini(&parse_ini("[solver]\nx = 1\n").unwrap()).is_err());
        assert!(RunConfig::from_ini(&parse_ini("[run]\nmethd = ao-exp\n").unwrap()).is_err());
        assert!(RunConfig::from_ini(&parse_ini("[run]\nmethod = pgd\n").unwrap()).is_err());
    }

    #[test]
    fn exit_codes() {
        use suap_core::Error;
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Numerical("x".into())).exit_code(), 2);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "x");
        assert_eq!(CliError::from(io).exit_code(), 3);
    }

    #[test]
    fn effective_config_round_trips() {
        let ini = parse_ini("[run]\nmethod = lora-pgd\nseed = 3\n[lora_pgd]\nnuclear_budget = inf\n").unwrap();
        let rc = RunConfig::from_ini(&ini).unwrap();
        let again = RunConfig::from_ini(&parse_ini(&rc.effective().to_string()).unwrap()).unwrap();
        assert_eq!(rc, again);
    }
}
