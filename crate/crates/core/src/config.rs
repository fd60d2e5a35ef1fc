//! Flat INI configuration: `[section]` headers, `key = value` lines and
//! `#`/`;` comments. Keys may repeat (e.g. one `object =` line per object).
//!
//! Typed readers reject unknown keys so that typos fail loudly, and every
//! typed section can be written back for provenance.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::detector::{Aggregation, DetectorConfig, KernelSpec};
use crate::losses::{LossWeights, RegularizerConfig};
use crate::scene::{Background, ObjectShape, SceneObject, SceneSpec};
use crate::solvers::{AoExpConfig, FwNuclConfig, LoRaPgdConfig, TopK};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

/// Parsed INI document; section and entry order is preserved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ini {
    sections: Vec<Section>,
}

/// Parses INI text from untrusted input.
pub fn parse_ini(text: &str) -> Result<Ini> {
    let mut ini = Ini::default();
    let mut current: Option<usize> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = n + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header")))?
                .trim()
                .to_ascii_lowercase();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("line {lineno}: invalid section name {name:?}")));
            }
            current = Some(ini.section_index_or_insert(&name));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(Error::Config(format!("line {lineno}: empty key")));
        }
        let idx = current.ok_or_else(|| Error::Config(format!("line {lineno}: key {key:?} outside any section")))?;
        ini.sections[idx].entries.push((key, value.trim().to_string()));
    }
    Ok(ini)
}

impl Ini {
    fn section_index_or_insert(&mut self, name: &str) -> usize {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            return i;
        }
        self.sections.push(Section {
            name: name.to_string(),
            entries: Vec::new(),
        });
        self.sections.len() - 1
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.section(name).is_some()
    }

    /// Last value of `key` in `section`.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)?
            .entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, section: &str, key: &str) -> Vec<&str> {
        self.section(section)
            .map(|s| {
                s.entries
                    .iter()
                    .filter(|(k, _)| k == key)
                    .map(|(_, v)| v.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Replaces every value of `key` with a single `value`.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let idx = self.section_index_or_insert(section);
        let entries = &mut self.sections[idx].entries;
        entries.retain(|(k, _)| k != key);
        entries.push((key.to_string(), value.into()));
    }

    pub fn push(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let idx = self.section_index_or_insert(section);
        self.sections[idx].entries.push((key.to_string(), value.into()));
    }

    /// Drops every value of `key`; empty sections are kept.
    pub fn remove(&mut self, section: &str, key: &str) {
        if let Some(sec) = self.sections.iter_mut().find(|s| s.name == section) {
            sec.entries.retain(|(k, _)| k != key);
        }
    }

    /// Values of `other` override values here, key by key.
    pub fn merge(&mut self, other: &Ini) {
        for s in &other.sections {
            let keys: Vec<&String> = s.entries.iter().map(|(k, _)| k).collect();
            let idx = self.section_index_or_insert(&s.name);
            self.sections[idx].entries.retain(|(k, _)| !keys.contains(&k));
            self.sections[idx].entries.extend(s.entries.iter().cloned());
        }
    }

    /// Typed lookup with a default for a missing key.
    pub fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}"))),
        }
    }

    /// Fails on any key in `section` outside `allowed`.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        if let Some(s) = self.section(section) {
            for (k, _) in &s.entries {
                if !allowed.contains(&k.as_str()) {
                    return Err(Error::Config(format!("[{section}] unknown key {k:?}")));
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Ini {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{}]", s.name)?;
            for (k, v) in &s.entries {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{what}: cannot parse {p:?} as a number")))
        })
        .collect()
}

/// `shape,radius,x,y,vx,vy,intensity`.
pub fn parse_object(s: &str) -> Result<SceneObject> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 7 {
        return Err(Error::Config(format!(
            "object needs shape,radius,x,y,vx,vy,intensity; got {s:?}"
        )));
    }
    let shape: ObjectShape = parts[0].parse()?;
    let nums = parse_f64_list(&parts[1..].join(","), "object")?;
    Ok(SceneObject {
        shape,
        radius: nums[0],
        start: (nums[1], nums[2]),
        velocity: (nums[3], nums[4]),
        intensity: nums[5],
    })
}

pub fn format_object(o: &SceneObject) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        o.shape, o.radius, o.start.0, o.start.1, o.velocity.0, o.velocity.1, o.intensity
    )
}

const SCENE_KEYS: &[&str] = &[
    "height",
    "width",
    "channels",
    "frames",
    "background_level",
    "noise_amplitude",
    "noise_seed",
    "object",
    "random_objects",
    "seed",
];

/// Scene from `[scene]`. With `random_objects = n` and no explicit
/// `object` lines, objects are placed by [`SceneSpec::random`] using `seed`.
pub fn scene_spec(ini: &Ini) -> Result<SceneSpec> {
    const S: &str = "scene";
    ini.check_keys(S, SCENE_KEYS)?;
    let height = ini.parse_or(S, "height", 64usize)?;
    let width = ini.parse_or(S, "width", 64usize)?;
    let channels = ini.parse_or(S, "channels", 3usize)?;
    let frames = ini.parse_or(S, "frames", 8usize)?;
    let seed = ini.parse_or(S, "seed", 0u64)?;
    let explicit = ini.get_all(S, "object");
    let mut spec = if explicit.is_empty() {
        let n = ini.parse_or(S, "random_objects", 2usize)?;
        SceneSpec::random(height, width, channels, frames, n, seed)?
    } else {
        if ini.get(S, "random_objects").is_some() {
            return Err(Error::Config("[scene] use either object lines or random_objects, not both".into()));
        }
        SceneSpec {
            height,
            width,
            channels,
            frame_count: frames,
            objects: explicit.into_iter().map(parse_object).collect::<Result<_>>()?,
            background: Background {
                seed,
                ..Background::default()
            },
        }
    };
    spec.background.level = ini.parse_or(S, "background_level", spec.background.level)?;
    spec.background.noise_amplitude = ini.parse_or(S, "noise_amplitude", spec.background.noise_amplitude)?;
    spec.background.seed = ini.parse_or(S, "noise_seed", spec.background.seed)?;
    spec.validate()?;
    Ok(spec)
}

/// Fully explicit `[scene]` section reproducing `spec`.
pub fn write_scene(ini: &mut Ini, spec: &SceneSpec) {
    const S: &str = "scene";
    ini.set(S, "height", spec.height.to_string());
    ini.set(S, "width", spec.width.to_string());
    ini.set(S, "channels", spec.channels.to_string());
    ini.set(S, "frames", spec.frame_count.to_string());
    ini.set(S, "background_level", spec.background.level.to_string());
    ini.set(S, "noise_amplitude", spec.background.noise_amplitude.to_string());
    ini.set(S, "noise_seed", spec.background.seed.to_string());
    if let Some(sec) = ini.sections.iter_mut().find(|s| s.name == S) {
        sec.entries.retain(|(k, _)| k != "object" && k != "random_objects" && k != "seed");
    }
    for o in &spec.objects {
        ini.push(S, "object", format_object(o));
    }
}

const DETECTOR_KEYS: &[&str] = &[
    "kernel_size",
    "kernel_sigma",
    "gain",
    "bias",
    "threshold",
    "confidence_threshold",
    "min_area",
    "aggregation",
];

pub fn detector_config(ini: &Ini) -> Result<DetectorConfig> {
    const S: &str = "detector";
    ini.check_keys(S, DETECTOR_KEYS)?;
    let d = DetectorConfig::default();
    let KernelSpec::Gaussian { size, sigma, gain } = d.kernel else {
        unreachable!("default kernel is Gaussian")
    };
    let cfg = DetectorConfig {
        kernel: KernelSpec::Gaussian {
            size: ini.parse_or(S, "kernel_size", size)?,
            sigma: ini.parse_or(S, "kernel_sigma", sigma)?,
            gain: ini.parse_or(S, "gain", gain)?,
        },
        bias: ini.parse_or(S, "bias", d.bias)?,
        threshold: ini.parse_or(S, "threshold", d.threshold)?,
        min_area: ini.parse_or(S, "min_area", d.min_area)?,
        aggregation: ini.parse_or::<Aggregation>(S, "aggregation", d.aggregation)?,
        confidence_threshold: ini.parse_or(S, "confidence_threshold", d.confidence_threshold)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_detector(ini: &mut Ini, cfg: &DetectorConfig) -> Result<()> {
    const S: &str = "detector";
    let KernelSpec::Gaussian { size, sigma, gain } = &cfg.kernel else {
        return Err(Error::Config("custom kernels cannot be written to a config file".into()));
    };
    ini.set(S, "kernel_size", size.to_string());
    ini.set(S, "kernel_sigma", sigma.to_string());
    ini.set(S, "gain", gain.to_string());
    ini.set(S, "bias", cfg.bias.to_string());
    ini.set(S, "threshold", cfg.threshold.to_string());
    ini.set(S, "confidence_threshold", cfg.confidence_threshold.to_string());
    ini.set(S, "min_area", cfg.min_area.to_string());
    ini.set(S, "aggregation", cfg.aggregation.to_string());
    Ok(())
}

pub fn loss_weights(ini: &Ini) -> Result<LossWeights> {
    const S: &str = "loss";
    ini.check_keys(S, &["alpha", "beta", "gamma"])?;
    let d = LossWeights::default();
    let w = LossWeights {
        alpha: ini.parse_or(S, "alpha", d.alpha)?,
        beta: ini.parse_or(S, "beta", d.beta)?,
        gamma: ini.parse_or(S, "gamma", d.gamma)?,
    };
    w.validate()?;
    Ok(w)
}

pub fn write_loss_weights(ini: &mut Ini, w: &LossWeights) {
    ini.set("loss", "alpha", w.alpha.to_string());
    ini.set("loss", "beta", w.beta.to_string());
    ini.set("loss", "gamma", w.gamma.to_string());
}

pub fn regularizer(ini: &Ini) -> Result<RegularizerConfig> {
    const S: &str = "regularizer";
    ini.check_keys(S, &["lambda1", "lambda2"])?;
    let d = RegularizerConfig::default();
    let r = RegularizerConfig {
        lambda1: ini.parse_or(S, "lambda1", d.lambda1)?,
        lambda2: ini.parse_or(S, "lambda2", d.lambda2)?,
    };
    r.validate()?;
    Ok(r)
}

pub fn write_regularizer(ini: &mut Ini, r: &RegularizerConfig) {
    ini.set("regularizer", "lambda1", r.lambda1.to_string());
    ini.set("regularizer", "lambda2", r.lambda2.to_string());
}

pub fn ao_exp_config(ini: &Ini) -> Result<AoExpConfig> {
    const S: &str = "ao_exp";
    ini.check_keys(S, &["iterations", "top_k", "eta0"])?;
    let d = AoExpConfig::default();
    let cfg = AoExpConfig {
        regularizer: regularizer(ini)?,
        iterations: ini.parse_or(S, "iterations", d.iterations)?,
        top_k: ini.parse_or::<TopK>(S, "top_k", d.top_k)?,
        eta0: ini.parse_or(S, "eta0", d.eta0)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_ao_exp(ini: &mut Ini, cfg: &AoExpConfig) {
    write_regularizer(ini, &cfg.regularizer);
    ini.set("ao_exp", "iterations", cfg.iterations.to_string());
    ini.set("ao_exp", "top_k", cfg.top_k.to_string());
    ini.set("ao_exp", "eta0", cfg.eta0.to_string());
}

fn parse_budget(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("none") {
        return Ok(f64::INFINITY);
    }
    t.parse()
        .map_err(|_| Error::Config(format!("[lora_pgd] nuclear_budget: cannot parse {s:?}")))
}

pub fn lora_pgd_config(ini: &Ini, seed: u64) -> Result<LoRaPgdConfig> {
    const S: &str = "lora_pgd";
    ini.check_keys(S, &["rank_fraction", "nuclear_budget", "step", "iterations", "init_scale"])?;
    let d = LoRaPgdConfig::default();
    let cfg = LoRaPgdConfig {
        rank_fraction: ini.parse_or(S, "rank_fraction", d.rank_fraction)?,
        nuclear_budget: ini.get(S, "nuclear_budget").map(parse_budget).transpose()?.unwrap_or(d.nuclear_budget),
        step: ini.parse_or(S, "step", d.step)?,
        iterations: ini.parse_or(S, "iterations", d.iterations)?,
        init_scale: ini.parse_or(S, "init_scale", d.init_scale)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_lora_pgd(ini: &mut Ini, cfg: &LoRaPgdConfig) {
    const S: &str = "lora_pgd";
    ini.set(S, "rank_fraction", cfg.rank_fraction.to_string());
    let budget = if cfg.nuclear_budget.is_infinite() {
        "inf".to_string()
    } else {
        cfg.nuclear_budget.to_string()
    };
    ini.set(S, "nuclear_budget", budget);
    ini.set(S, "step", cfg.step.to_string());
    ini.set(S, "iterations", cfg.iterations.to_string());
    ini.set(S, "init_scale", cfg.init_scale.to_string());
}

pub fn fw_nucl_config(ini: &Ini) -> Result<FwNuclConfig> {
    const S: &str = "fw_nucl";
    ini.check_keys(S, &["epsilon", "iterations", "line_search_evals"])?;
    let d = FwNuclConfig::default();
    let cfg = FwNuclConfig {
        epsilon: ini.parse_or(S, "epsilon", d.epsilon)?,
        iterations: ini.parse_or(S, "iterations", d.iterations)?,
        line_search_evals: ini.parse_or(S, "line_search_evals", d.line_search_evals)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_fw_nucl(ini: &mut Ini, cfg: &FwNuclConfig) {
    ini.set("fw_nucl", "epsilon", cfg.epsilon.to_string());
    ini.set("fw_nucl", "iterations", cfg.iterations.to_string());
    ini.set("fw_nucl", "line_search_evals", cfg.line_search_evals.to_string());
}

/// Canonical text used for hashing: sections and keys sorted.
pub fn canonical_text(ini: &Ini) -> String {
    let mut sections: Vec<&Section> = ini.sections.iter().collect();
    sections.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = String::new();
    for s in sections {
        let mut entries = s.entries.clone();
        entries.sort();
        for (k, v) in entries {
            let _ = writeln!(out, "{}.{}={}", s.name, k, v);
        }
    }
    out
}
