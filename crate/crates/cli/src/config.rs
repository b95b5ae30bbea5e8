use std::fs;
use std::path::{Path, PathBuf};

use coverbias::boost::{BoostParams, DEFAULT_FOLDS, DEFAULT_TRAIN_FRACTION};
use coverbias::explain::DEPENDENCE_TOP;
use coverbias::homeloc::{HomeRule, TimeWindow};
use coverbias::loess::DEFAULT_SPAN;
use coverbias::spatial::{parse_schemes, Alternative, Scheme, DEFAULT_HISTOGRAM_BINS, DEFAULT_PERMUTATIONS};
use coverbias::{Error, Result};
use serde::{Deserialize, Serialize};

/// Input files shared by every source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub areas: PathBuf,
    pub census: PathBuf,
    pub covariates: PathBuf,
    #[serde(default)]
    pub feature_schema: Option<PathBuf>,
    /// CSV `name,respondents,reference_population`.
    #[serde(default)]
    pub surveys: Option<PathBuf>,
}

/// One digital source. Exactly one of `counts`, `pings` or `tiles` is set.
/// Tile counts are averaged over `window`, W1 (00:00-08:00) by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub id: String,
    #[serde(default)]
    pub counts: Option<PathBuf>,
    #[serde(default)]
    pub pings: Option<PathBuf>,
    #[serde(default)]
    pub tiles: Option<PathBuf>,
    #[serde(default)]
    pub window: Option<TimeWindow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceInput<'a> {
    Counts(&'a Path),
    Pings(&'a Path),
    Tiles(&'a Path, TimeWindow),
}

impl SourceConfig {
    pub fn input(&self) -> Result<SourceInput<'_>> {
        match (&self.counts, &self.pings, &self.tiles) {
            (Some(c), None, None) => Ok(SourceInput::Counts(c)),
            (None, Some(p), None) => Ok(SourceInput::Pings(p)),
            (None, None, Some(t)) => Ok(SourceInput::Tiles(t, self.window.unwrap_or(TimeWindow::W1))),
            _ => Err(Error::Schema(format!(
                "source `{}` must set exactly one of counts, pings, tiles",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub schemes: Vec<String>,
    pub permutations: usize,
    pub alternative: Alternative,
    pub row_standardize: bool,
    pub histogram_bins: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            schemes: vec!["queen".into(), "knn".into(), "band".into()],
            permutations: DEFAULT_PERMUTATIONS,
            alternative: Alternative::Greater,
            row_standardize: true,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

impl SpatialConfig {
    pub fn parsed_schemes(&self) -> Result<Vec<Scheme>> {
        self.schemes.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub params: BoostParams,
    /// Run the CV grid search; otherwise fit `params` directly.
    pub tune: bool,
    /// Replaces the default grid when set.
    pub grid: Option<Vec<BoostParams>>,
    pub folds: usize,
    pub train_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            params: BoostParams::default(),
            tune: true,
            grid: None,
            folds: DEFAULT_FOLDS,
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub span: f64,
    pub dependence_top: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            span: DEFAULT_SPAN,
            dependence_top: DEPENDENCE_TOP,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub allow_partial: bool,
    pub inputs: Inputs,
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub home_rule: HomeRule,
    #[serde(default)]
    pub spatial: SpatialConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub allow_partial: bool,
    pub schemes: Option<String>,
    pub permutations: Option<usize>,
    pub night_window: Option<String>,
}

impl RunConfig {
    /// Parse TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Schema(format!("config: {e}")))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        fix(&mut self.inputs.areas);
        fix(&mut self.inputs.census);
        fix(&mut self.inputs.covariates);
        for p in [&mut self.inputs.feature_schema, &mut self.inputs.surveys].into_iter().flatten() {
            fix(p);
        }
        for s in &mut self.sources {
            for p in [&mut s.counts, &mut s.pings, &mut s.tiles].into_iter().flatten() {
                fix(p);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.allow_partial |= o.allow_partial;
        if let Some(list) = &o.schemes {
            parse_schemes(list)?;
            self.spatial.schemes = list.split(',').map(|s| s.trim().to_string()).collect();
        }
        if let Some(n) = o.permutations {
            self.spatial.permutations = n;
        }
        if let Some(w) = &o.night_window {
            self.home_rule = self.home_rule.with_night_window(w)?;
        }
        Ok(())
    }

    /// Check settings and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let must_exist = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Schema(format!("{what} file `{}` does not exist", p.display())))
            }
        };
        must_exist(&self.inputs.areas, "areas")?;
        must_exist(&self.inputs.census, "census")?;
        must_exist(&self.inputs.covariates, "covariates")?;
        if let Some(p) = &self.inputs.feature_schema {
            must_exist(p, "feature schema")?;
        }
        if let Some(p) = &self.inputs.surveys {
            must_exist(p, "surveys")?;
        }
        if self.sources.is_empty() {
            return Err(Error::Schema("config lists no sources".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sources {
            if s.id.is_empty()
                || s.id.starts_with('.')
                || !s.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            {
                return Err(Error::Schema(format!(
                    "source id `{}` must be letters, digits, `-`, `_` or `.`",
                    s.id
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateKey(s.id.clone()));
            }
            match s.input()? {
                SourceInput::Counts(p) => must_exist(p, "counts")?,
                SourceInput::Pings(p) => must_exist(p, "pings")?,
                SourceInput::Tiles(p, _) => must_exist(p, "tiles")?,
            }
        }
        self.home_rule.validate()?;
        self.spatial.parsed_schemes()?;
        if self.spatial.histogram_bins == 0 {
            return Err(Error::Domain("histogram_bins must be at least 1".into()));
        }
        self.model.params.validate()?;
        if !(self.explain.span > 0.0 && self.explain.span <= 1.0) {
            return Err(Error::Domain("explain span must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
