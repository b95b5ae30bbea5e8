use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coverbias::bias::BiasTable;
use coverbias::boost::TreeEnsemble;
use coverbias::explain::{BeeswarmRecord, DependenceExport, ImportanceProfile};
use coverbias::ingest::{load_area_geometries, load_count_table, load_covariates};
use coverbias::spatial::Alternative;
use coverbias::synth::{generate_counts, generate_world, write_world, ScenarioSpec};
use coverbias::{Error, Result};
use coverbias_cli::config::{Inputs, SourceConfig};
use coverbias_cli::pipeline::{
    coverage_stage, explain_stage, homes_stage, load_inputs, model_stage, spatial_stage, write_predictions_csv,
    write_shap_csv, write_text,
};
use coverbias_cli::report::write_json;
use coverbias_cli::{exit_code, init_threads, Overrides, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "coverbias", version, about = "Measure, map and explain population coverage bias")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the areas common to all inputs when keys disagree.
    #[arg(long, global = true)]
    allow_partial: bool,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Weighting schemes, e.g. `queen,knn:8,band`.
    #[arg(long, global = true)]
    schemes: Option<String>,
    /// Moran's I permutations.
    #[arg(long, global = true)]
    permutations: Option<usize>,
    /// Home-detection night window, `HH:MM-HH:MM`.
    #[arg(long, global = true)]
    night_window: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load every input named in the config and report key alignment.
    IngestCheck,
    /// Detect device homes from GPS pings and count them per area.
    Homes {
        #[arg(long)]
        pings: PathBuf,
        #[arg(long)]
        areas: PathBuf,
        #[arg(long, default_value = "pings")]
        source_id: String,
    },
    /// Per-area coverage and bias of a source against the census.
    Coverage {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        census: PathBuf,
        #[arg(long, default_value = "source")]
        source_id: String,
    },
    /// Moran's I across weighting schemes for a bias table.
    Spatial {
        #[arg(long)]
        bias: PathBuf,
        #[arg(long)]
        areas: PathBuf,
        /// Census counts, for the bias-population correlation.
        #[arg(long)]
        census: Option<PathBuf>,
        #[arg(long)]
        two_sided: bool,
    },
    /// Tune and fit the boosted bias model.
    Model {
        #[arg(long)]
        bias: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long)]
        feature_schema: Option<PathBuf>,
        /// Fit the configured parameters without a grid search.
        #[arg(long)]
        no_tune: bool,
    },
    /// SHAP attribution, importance and figure data for a fitted model.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bias: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long)]
        feature_schema: Option<PathBuf>,
    },
    /// Generate a synthetic world, its source counts and a run config.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run the full pipeline and write report.json.
    Run,
}

#[derive(Serialize)]
struct ExplainFile {
    expected_value: f64,
    importance: ImportanceProfile,
    beeswarm: Vec<BeeswarmRecord>,
    dependence: Vec<DependenceExport>,
    warnings: Vec<String>,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            allow_partial: self.allow_partial,
            schemes: self.schemes.clone(),
            permutations: self.permutations,
            night_window: self.night_window.clone(),
        }
    }

    fn require_config(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Schema("this command needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }

    /// Settings from `--config` if given, else defaults; flags win either way.
    /// Input paths are not checked.
    fn settings(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig {
                seed: 0,
                out: PathBuf::from("out"),
                allow_partial: false,
                inputs: Inputs {
                    areas: PathBuf::new(),
                    census: PathBuf::new(),
                    covariates: PathBuf::new(),
                    feature_schema: None,
                    surveys: None,
                },
                sources: Vec::new(),
                home_rule: Default::default(),
                spatial: Default::default(),
                model: Default::default(),
                explain: Default::default(),
            },
        };
        cfg.apply(&Overrides {
            out: None,
            ..self.overrides()
        })?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Schema("this command needs --out".into()))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn read_bias(path: &Path, source_id: &str) -> Result<BiasTable> {
    BiasTable::read_csv(open(path)?, source_id)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(format!("json: {e}")))?;
    println!("{text}");
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::IngestCheck => {
            let cfg = cli.require_config()?;
            cfg.validate()?;
            let loaded = load_inputs(&cfg)?;
            print_json(&loaded.alignment)
        }
        Command::Homes {
            pings,
            areas,
            source_id,
        } => {
            let cfg = cli.settings()?;
            let areas = load_area_geometries(areas)?;
            let (table, info) = homes_stage(pings, &areas, &cfg.home_rule, source_id)?;
            table.save(cli.out()?)?;
            print_json(&info)
        }
        Command::Coverage {
            counts,
            census,
            source_id,
        } => {
            let counts = load_count_table(counts, source_id)?;
            let census = load_count_table(census, "census")?;
            let out = coverage_stage(&counts, &census)?;
            let path = cli.out()?;
            out.bias.write_csv(File::create(path).map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })?)?;
            print_json(&out.summary)
        }
        Command::Spatial {
            bias,
            areas,
            census,
            two_sided,
        } => {
            let mut cfg = cli.settings()?;
            if *two_sided {
                cfg.spatial.alternative = Alternative::TwoSided;
            }
            let bias = read_bias(bias, "source")?;
            let areas = load_area_geometries(areas)?;
            let census = census.as_deref().map(|p| load_count_table(p, "census")).transpose()?;
            let report = spatial_stage(&bias, &areas, census.as_ref(), &cfg.spatial, cfg.seed)?;
            write_json(cli.out()?, &report)
        }
        Command::Model {
            bias,
            covariates,
            feature_schema,
            no_tune,
        } => {
            let mut cfg = cli.settings()?;
            if *no_tune {
                cfg.model.tune = false;
            }
            let bias = read_bias(bias, "source")?;
            let covariates = load_covariates(covariates, feature_schema.as_deref())?;
            let (_, outcome) = model_stage(&bias, &covariates, &cfg.model, cfg.seed)?;
            let dir = cli.out()?;
            ensure_dir(dir)?;
            write_text(&dir.join("model.json"), &outcome.ensemble.to_json())?;
            write_json(&dir.join("fit.json"), &outcome.report)?;
            write_predictions_csv(&outcome, &dir.join("predictions.csv"))
        }
        Command::Explain {
            model,
            bias,
            covariates,
            feature_schema,
        } => {
            let cfg = cli.settings()?;
            let text = std::fs::read_to_string(model).map_err(|e| Error::Io {
                path: model.clone(),
                source: e,
            })?;
            let ensemble = TreeEnsemble::from_json(&text)?;
            let bias = read_bias(bias, "source")?;
            let covariates = load_covariates(covariates, feature_schema.as_deref())?;
            let data = coverbias::boost::Dataset::from_tables(&bias, &covariates)?;
            let out = explain_stage(&ensemble, &data, &cfg.explain)?;
            let dir = cli.out()?;
            ensure_dir(dir)?;
            write_shap_csv(&out.shap, &dir.join("shap.csv"))?;
            write_json(
                &dir.join("explain.json"),
                &ExplainFile {
                    expected_value: out.shap.expected_value,
                    importance: out.importance,
                    beeswarm: out.beeswarm,
                    dependence: out.dependence,
                    warnings: out.warnings,
                },
            )
        }
        Command::Synth { spec } => {
            let mut spec = ScenarioSpec::load(spec)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let dir = cli.out()?;
            let world = generate_world(&spec)?;
            let counts = generate_counts(&world, &spec)?;
            let files = write_world(&world, Some(&counts), dir)?;
            let name = |p: &Path| PathBuf::from(p.file_name().expect("written file has a name"));
            let mut cfg = cli.settings()?;
            cfg.seed = cli.seed.unwrap_or(spec.seed);
            cfg.out = PathBuf::from("report");
            cfg.inputs = Inputs {
                areas: name(&files.areas),
                census: name(&files.census),
                covariates: name(&files.covariates),
                feature_schema: Some(name(&files.feature_schema)),
                surveys: None,
            };
            cfg.sources = vec![SourceConfig {
                id: "synthetic".into(),
                counts: files.counts.as_deref().map(name),
                pings: None,
                tiles: None,
                window: None,
            }];
            let text = toml::to_string(&cfg).map_err(|e| Error::Schema(format!("config: {e}")))?;
            write_text(&dir.join("config.toml"), &text)?;
            println!("{}", dir.join("config.toml").display());
            Ok(())
        }
        Command::Run => {
            let cfg = cli.require_config()?;
            let path = coverbias_cli::run_pipeline(&cfg)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| execute(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
