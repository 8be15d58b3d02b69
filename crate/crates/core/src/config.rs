//! Strict flat TOML experiment configuration.
//!
//! Every key is optional and top-level; unknown keys are errors. Validation
//! collects every problem before failing. Scale indices are one-based here
//! (`velocity_levels = [1, 3, 5]`). See `docs/config.md` for the full key
//! list.

use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::Value;

use crate::data::{GeneratorConfig, IntensityMap};
use crate::losses::{LossWeights, Stage};
use crate::manifold::TemplateReduction;
use crate::networks::ModelConfig;
use crate::training::{default_lambdas, Sf2Selection, TrainConfig};
use crate::{io_err, Error, Result};

pub const CONFIG_VERSION: i64 = 1;

/// Fully populated experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: Option<Stage>,
    pub seed: u64,
    pub deterministic: bool,
    pub data_root: Option<PathBuf>,
    pub output_root: PathBuf,
    pub model: ModelConfig,
    /// `None` means the per-stage defaults.
    pub lambdas: Option<[f64; 5]>,
    pub tau: f64,
    pub template_reduction: TemplateReduction,
    pub usage: bool,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: Option<usize>,
    pub validate_every: usize,
    pub sf2_selection: Sf2Selection,
    pub generator: GeneratorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::new(Stage::Sa);
        Self {
            mode: None,
            seed: 0,
            deterministic: true,
            data_root: None,
            output_root: PathBuf::from("runs"),
            model: ModelConfig::default(),
            lambdas: None,
            tau: t.weights.tau,
            template_reduction: t.template_reduction,
            usage: t.usage,
            batch_source: t.batch_source,
            batch_target: t.batch_target,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: None,
            validate_every: t.validate_every,
            sf2_selection: t.sf2_selection,
            generator: GeneratorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Training settings for one stage, with stage defaults filled in.
    pub fn train_config(&self, mode: Stage) -> TrainConfig {
        let mut t = TrainConfig::new(mode);
        t.model = self.model.clone();
        t.weights = LossWeights::new(self.lambdas.unwrap_or_else(|| default_lambdas(mode)), self.tau);
        t.batch_source = self.batch_source;
        t.batch_target = self.batch_target;
        t.lr = self.lr;
        t.weight_decay = self.weight_decay;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        t.seed = self.seed;
        t.template_reduction = self.template_reduction;
        t.usage = self.usage;
        t.sf2_selection = self.sf2_selection;
        t.validate_every = self.validate_every;
        t
    }

    /// Flat TOML rendering that [`parse_config`] accepts back.
    pub fn to_toml(&self) -> String {
        let m = &self.model;
        let g = &self.generator;
        let mut s = format!("version = {CONFIG_VERSION}\n");
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        if let Some(mode) = self.mode {
            kv("mode", format!("\"{mode}\""));
        }
        kv("seed", self.seed.to_string());
        kv("deterministic", self.deterministic.to_string());
        if let Some(d) = &self.data_root {
            kv("data_root", toml_str(&d.to_string_lossy()));
        }
        kv("output_root", toml_str(&self.output_root.to_string_lossy()));
        kv("levels", m.levels.to_string());
        kv(
            "velocity_levels",
            format!("[{}]", m.velocity_levels.iter().map(|l| (l + 1).to_string()).collect::<Vec<_>>().join(", ")),
        );
        kv("num_bases", m.num_bases.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("image_size", m.image_size.to_string());
        kv("latent_channels", m.latent_channels.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("registration_channels", m.registration_channels.to_string());
        kv("squaring_steps", m.squaring_steps.to_string());
        kv("lambda_smooth", fmt_f(m.lambda_smooth));
        kv("lambda_mag", fmt_f(m.lambda_mag));
        if let Some(l) = self.lambdas {
            kv("lambdas", format!("\"{}\"", l.map(|v| v.to_string()).join(",")));
        }
        kv("tau", fmt_f(self.tau));
        kv(
            "template_reduction",
            match self.template_reduction {
                TemplateReduction::Sum => "\"sum\"".into(),
                TemplateReduction::PerElement => "\"per_element\"".into(),
            },
        );
        kv("usage", self.usage.to_string());
        kv("batch_source", self.batch_source.to_string());
        kv("batch_target", self.batch_target.to_string());
        kv("lr", fmt_f(self.lr));
        kv("weight_decay", fmt_f(self.weight_decay));
        if let Some(e) = self.epochs {
            kv("epochs", e.to_string());
        }
        kv("validate_every", self.validate_every.to_string());
        kv(
            "sf2_selection",
            match self.sf2_selection {
                Sf2Selection::ReconNll => "\"recon_nll\"".into(),
                Sf2Selection::TargetDice => "\"target_dice\"".into(),
            },
        );
        kv("gen_size", g.size.to_string());
        kv("gen_variants", g.variants.to_string());
        for (p, im) in [("gen_source", &g.source), ("gen_target", &g.target)] {
            kv(&format!("{p}_gamma"), fmt_f(im.gamma));
            kv(&format!("{p}_invert"), im.invert.to_string());
            kv(&format!("{p}_noise"), fmt_f(im.noise_std));
            kv(&format!("{p}_bias"), fmt_f(im.bias_amplitude));
        }
        kv("gen_elastic", fmt_f(g.elastic_amplitude));
        kv("gen_spacing_mm", fmt_f(g.spacing_mm));
        kv("gen_source_train", g.source_train.to_string());
        kv("gen_source_val", g.source_val.to_string());
        kv("gen_target_train", g.target_train.to_string());
        kv("gen_target_val", g.target_val.to_string());
        kv("gen_target_test", g.target_test.to_string());
        kv("gen_seed", g.seed.to_string());
        s
    }
}

fn toml_str(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn fmt_f(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

struct Reader<'a> {
    table: &'a toml::Table,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.get(key)
    }

    fn int(&mut self, key: &str, min: i64) -> Option<i64> {
        match self.get(key)? {
            Value::Integer(i) if *i >= min => Some(*i),
            Value::Integer(i) => {
                self.errors.push(format!("{key} = {i} must be >= {min}"));
                None
            }
            other => {
                self.errors.push(format!("{key} must be an integer, got {}", other.type_str()));
                None
            }
        }
    }

    fn usize(&mut self, key: &str, min: i64, dst: &mut usize) {
        if let Some(v) = self.int(key, min) {
            *dst = v as usize;
        }
    }

    fn float(&mut self, key: &str, dst: &mut f64) {
        match self.get(key) {
            None => {}
            Some(Value::Float(f)) if f.is_finite() => *dst = *f,
            Some(Value::Integer(i)) => *dst = *i as f64,
            Some(other) => self.errors.push(format!("{key} must be a finite number, got {other}")),
        }
    }

    fn boolean(&mut self, key: &str, dst: &mut bool) {
        match self.get(key) {
            None => {}
            Some(Value::Boolean(b)) => *dst = *b,
            Some(other) => self.errors.push(format!("{key} must be true or false, got {}", other.type_str())),
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.errors.push(format!("{key} must be a string, got {}", other.type_str()));
                None
            }
        }
    }

    fn choice<T: Copy>(&mut self, key: &str, options: &[(&str, T)], dst: &mut T) {
        if let Some(s) = self.string(key) {
            match options.iter().find(|(n, _)| *n == s) {
                Some((_, v)) => *dst = *v,
                None => {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    self.errors.push(format!("{key} = \"{s}\" must be one of {}", names.join(", ")));
                }
            }
        }
    }
}

const KEYS: &[&str] = &[
    "version",
    "mode",
    "seed",
    "deterministic",
    "data_root",
    "output_root",
    "levels",
    "velocity_levels",
    "num_bases",
    "num_classes",
    "image_size",
    "latent_channels",
    "base_channels",
    "registration_channels",
    "squaring_steps",
    "lambda_smooth",
    "lambda_mag",
    "lambdas",
    "tau",
    "template_reduction",
    "usage",
    "batch_source",
    "batch_target",
    "lr",
    "weight_decay",
    "epochs",
    "validate_every",
    "sf2_selection",
    "gen_size",
    "gen_variants",
    "gen_source_gamma",
    "gen_source_invert",
    "gen_source_noise",
    "gen_source_bias",
    "gen_target_gamma",
    "gen_target_invert",
    "gen_target_noise",
    "gen_target_bias",
    "gen_elastic",
    "gen_spacing_mm",
    "gen_source_train",
    "gen_source_val",
    "gen_target_train",
    "gen_target_val",
    "gen_target_test",
    "gen_seed",
];

/// Parses and validates configuration text. Relative paths resolve against
/// `base_dir`. Returns every violation found.
pub fn parse_config(text: &str, base_dir: &Path) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![format!("malformed TOML: {}", e.message())])?;
    let mut r = Reader {
        table: &table,
        errors: Vec::new(),
    };
    for (k, v) in &table {
        if !KEYS.contains(&k.as_str()) {
            r.errors.push(format!("unknown key `{k}`"));
        } else if v.is_table() {
            r.errors.push(format!("{k}: nested tables are not allowed"));
        }
    }
    if let Some(v) = r.int("version", 0) {
        if v != CONFIG_VERSION {
            r.errors.push(format!("version = {v} is not supported (expected {CONFIG_VERSION})"));
        }
    }
    let mut c = ExperimentConfig::default();
    if let Some(s) = r.string("mode") {
        c.mode = match s.as_str() {
            "sa" => Some(Stage::Sa),
            "sf1" => Some(Stage::Sf1),
            "sf2" => Some(Stage::Sf2),
            other => {
                r.errors.push(format!("mode = \"{other}\" must be one of sa, sf1, sf2"));
                None
            }
        };
    }
    if let Some(v) = r.int("seed", 0) {
        c.seed = v as u64;
        c.generator.seed = v as u64;
    }
    r.boolean("deterministic", &mut c.deterministic);
    if let Some(s) = r.string("data_root") {
        let p = resolve(base_dir, &s);
        if !p.is_dir() {
            r.errors.push(format!("data_root {} does not exist", p.display()));
        }
        c.data_root = Some(p);
    }
    if let Some(s) = r.string("output_root") {
        c.output_root = resolve(base_dir, &s);
    }

    let m = &mut c.model;
    r.usize("levels", 1, &mut m.levels);
    match r.get("velocity_levels") {
        None => {
            // Keep the paper's {1, 3, 5} pattern when only L changes.
            if m.levels != 5 {
                m.velocity_levels = (0..m.levels).step_by(2).collect();
                if m.levels % 2 == 0 {
                    m.velocity_levels.push(m.levels - 1);
                }
            }
        }
        Some(Value::Array(a)) => {
            let mut out = Vec::new();
            for v in a {
                match v.as_integer() {
                    Some(i) if i >= 1 => out.push(i as usize - 1),
                    _ => {
                        r.errors.push(format!("velocity_levels entries must be integers >= 1, got {v}"));
                    }
                }
            }
            m.velocity_levels = out;
        }
        Some(other) => r.errors.push(format!("velocity_levels must be an array, got {}", other.type_str())),
    }
    r.usize("num_bases", 0, &mut m.num_bases);
    r.usize("num_classes", 0, &mut m.num_classes);
    r.usize("image_size", 1, &mut m.image_size);
    r.usize("latent_channels", 1, &mut m.latent_channels);
    r.usize("base_channels", 1, &mut m.base_channels);
    r.usize("registration_channels", 1, &mut m.registration_channels);
    if let Some(v) = r.int("squaring_steps", 1) {
        m.squaring_steps = v as u32;
    }
    r.float("lambda_smooth", &mut m.lambda_smooth);
    r.float("lambda_mag", &mut m.lambda_mag);
    if !(m.lambda_smooth > 0.0 && m.lambda_mag > 0.0) {
        r.errors.push("lambda_smooth and lambda_mag must be > 0".into());
    }

    match r.get("lambdas") {
        None => {}
        Some(Value::String(s)) => match LossWeights::parse_lambdas(s) {
            Ok(l) => c.lambdas = Some(l),
            Err(e) => r.errors.push(format!("lambdas: {e}")),
        },
        Some(Value::Array(a)) if a.len() == 5 => {
            let vals: Option<Vec<f64>> = a.iter().map(|v| v.as_float().or(v.as_integer().map(|i| i as f64))).collect();
            match vals {
                Some(v) => c.lambdas = Some([v[0], v[1], v[2], v[3], v[4]]),
                None => r.errors.push("lambdas entries must be numbers".into()),
            }
        }
        Some(_) => r.errors.push("lambdas must be \"l1,l2,l3,l4,l5\" or an array of 5 numbers".into()),
    }
    r.float("tau", &mut c.tau);
    r.choice(
        "template_reduction",
        &[("sum", TemplateReduction::Sum), ("per_element", TemplateReduction::PerElement)],
        &mut c.template_reduction,
    );
    r.boolean("usage", &mut c.usage);
    r.usize("batch_source", 1, &mut c.batch_source);
    r.usize("batch_target", 1, &mut c.batch_target);
    r.float("lr", &mut c.lr);
    r.float("weight_decay", &mut c.weight_decay);
    if let Some(e) = r.int("epochs", 1) {
        c.epochs = Some(e as usize);
    }
    r.usize("validate_every", 1, &mut c.validate_every);
    r.choice(
        "sf2_selection",
        &[("recon_nll", Sf2Selection::ReconNll), ("target_dice", Sf2Selection::TargetDice)],
        &mut c.sf2_selection,
    );

    let g = &mut c.generator;
    r.usize("gen_size", 8, &mut g.size);
    r.usize("gen_variants", 1, &mut g.variants);
    for (p, im) in [("gen_source", &mut g.source), ("gen_target", &mut g.target)] {
        read_intensity(&mut r, p, im);
    }
    r.float("gen_elastic", &mut g.elastic_amplitude);
    r.float("gen_spacing_mm", &mut g.spacing_mm);
    r.usize("gen_source_train", 0, &mut g.source_train);
    r.usize("gen_source_val", 0, &mut g.source_val);
    r.usize("gen_target_train", 0, &mut g.target_train);
    r.usize("gen_target_val", 0, &mut g.target_val);
    r.usize("gen_target_test", 0, &mut g.target_test);
    if let Some(v) = r.int("gen_seed", 0) {
        g.seed = v as u64;
    }

    let mut errors = r.errors;
    // Cross-field checks run on whatever parsed.
    errors.extend(c.model.violations());
    for stage in [Stage::Sa, Stage::Sf1, Stage::Sf2] {
        if c.mode.is_none() || c.mode == Some(stage) {
            let t = c.train_config(stage);
            for v in t.violations() {
                if !errors.contains(&v) {
                    errors.push(v);
                }
            }
        }
    }
    errors.extend(c.generator.violations());
    errors.dedup();
    if errors.is_empty() {
        Ok(c)
    } else {
        Err(errors)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    if base.as_os_str().is_empty() || base == Path::new(".") {
        PathBuf::from(p)
    } else {
        base.join(p)
    }
}

fn read_intensity(r: &mut Reader, prefix: &str, im: &mut IntensityMap) {
    r.float(&format!("{prefix}_gamma"), &mut im.gamma);
    r.boolean(&format!("{prefix}_invert"), &mut im.invert);
    r.float(&format!("{prefix}_noise"), &mut im.noise_std);
    r.float(&format!("{prefix}_bias"), &mut im.bias_amplitude);
}

/// Reads and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base).map_err(Error::Validation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> std::result::Result<ExperimentConfig, Vec<String>> {
        parse_config(s, Path::new("."))
    }

    #[test]
    fn minimal_file_gets_paper_defaults() {
        let c = parse("version = 1\n").unwrap();
        assert_eq!(c.model.levels, 5);
        assert_eq!(c.model.velocity_levels, vec![0, 2, 4]);
        assert_eq!(c.model.num_bases, 6);
    }

    #[test]
    fn every_violation_is_reported() {
        let e = parse("velocity_levels = [3, 1]\ntau = 0.3\nbogus = 1\nlr = \"x\"\n").unwrap_err();
        assert!(e.iter().any(|m| m.contains("ascending")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("tau")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("bogus")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("lr")), "{e:?}");
    }

    #[test]
    fn table_weight_strings() {
        let c = parse("lambdas = \"0,15,65,0,0\"\nmode = \"sf2\"\n").unwrap();
        assert_eq!(c.train_config(Stage::Sf2).weights.lambda, [0.0, 15.0, 65.0, 0.0, 0.0]);
    }

    #[test]
    fn rendering_round_trips() {
        let mut c = ExperimentConfig::default();
        c.lambdas = Some([20.0, 15.0, 25.0, 1e-4, 10.0]);
        c.epochs = Some(3);
        c.model.image_size = 32;
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
    }
}
