//! Run configurations and command execution behind the `scoreuq` binary.
//!
//! Each run reads one JSON document whose `"command"` field names the
//! command; unknown keys are rejected. Outputs go to the run directory and a
//! `manifest.json` with SHA-256 hashes of every output is written last.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::csv_row;
use crate::error::{Error, Result};
use crate::experiment::{
    argmax, guided_batch, prior_draws, reference_samples, scored_batch, step_profile,
    BenchmarkSpec,
};
use crate::guidance::{
    calibrate_thresholds, mask_above, percentile, GuidanceConfig, ThresholdMode,
};
use crate::io::{
    load_mlp, read_bytes, read_matrix, save_mlp, write_bytes, write_image_map, write_matrix,
    write_trajectory, CsvTable, RunManifest,
};
use crate::metrics::{
    energy_distance, filter_pool, fisher_identity_check, reconstruction_eval,
    ReconstructionConfig, DEFAULT_BINS, DEFAULT_SHUFFLES,
};
use crate::mlp::{train_dsm, MlpConfig};
use crate::rng::{Purpose, RngStream};
use crate::sampler::{PosteriorVariance, SamplerConfig, SamplerKind};
use crate::schedule::{NoiseSchedule, ScheduleConfig, TimestepPlan};
use crate::score::{DatasetPredictor, GmmDistribution, GmmPredictor, NoisePredictor};
use crate::uncertainty::{
    uncertainty_profile, McDropout, Perturbation, UncertaintyConfig, UncertaintyRecorder,
    UncertaintySource,
};

pub const COMMANDS: [&str; 8] = [
    "train",
    "sample",
    "guide",
    "filter-eval",
    "sparsify-eval",
    "verify-identity",
    "profile",
    "bench",
];

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "SCOREUQ_THREADS";

/// Where data comes from. Relative paths are resolved against the directory
/// of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Benchmark(BenchmarkSpec),
    Gmm(GmmDistribution),
    /// JSON file holding a mixture (`weights`, `means`, `variances`).
    GmmFile(PathBuf),
    Points(Vec<Vec<f64>>),
    /// JSON file `{"points": [[...], ...]}` or a 2-D UDT1 tensor.
    PointsFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    /// Closed-form predictor of the configured mixture.
    Exact,
    /// Closed-form predictor of the configured point set.
    Dataset,
    /// Directory written by `train`.
    Model(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    #[serde(default = "default_kind")]
    pub kind: SamplerKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub variance: PosteriorVariance,
}

fn default_kind() -> SamplerKind {
    SamplerKind::Ddim
}
fn default_steps() -> usize {
    50
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            steps: default_steps(),
            variance: PosteriorVariance::default(),
        }
    }
}

impl SamplerSpec {
    fn build(&self, schedule: &NoiseSchedule, seed: u64) -> Result<SamplerConfig> {
        let plan = TimestepPlan::uniform(schedule.timesteps(), self.steps)?;
        Ok(SamplerConfig {
            variance: self.variance,
            record_states: false,
            ..SamplerConfig::new(self.kind, plan, seed)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_mlp")]
    pub mlp: MlpConfig,
    /// Training set size when `data` is a distribution.
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mlp() -> MlpConfig {
    MlpConfig::new(0)
}
fn default_train_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default)]
    pub data: Option<DataSpec>,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Record window uncertainty for every sample.
    #[serde(default)]
    pub uncertainty: Option<UncertaintyConfig>,
    /// Number of leading samples whose full trajectories are dumped.
    #[serde(default)]
    pub trajectories: usize,
    /// `[width, height]` for rendering samples and maps as PGM images.
    #[serde(default)]
    pub image_shape: Option<[usize; 2]>,
    /// Number of leading samples rendered when `image_shape` is set.
    #[serde(default)]
    pub images: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_count() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideConfig {
    #[serde(default)]
    pub data: Option<DataSpec>,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    /// Calibrate per-step thresholds on this many unguided runs first.
    #[serde(default)]
    pub calibrate: Option<usize>,
    #[serde(default)]
    pub image_shape: Option<[usize; 2]>,
    /// Number of leading samples whose per-step masks are rendered.
    #[serde(default)]
    pub images: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterEvalConfig {
    pub data: DataSpec,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default = "default_pool")]
    pub pool: usize,
    #[serde(default = "default_keep")]
    pub keep: usize,
    #[serde(default = "default_reference")]
    pub reference: usize,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    /// Generate the pool with guided sampling.
    #[serde(default)]
    pub guidance: Option<GuidanceConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_pool() -> usize {
    6000
}
fn default_keep() -> usize {
    5000
}
fn default_reference() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDropoutSpec {
    pub model: PathBuf,
    #[serde(default = "default_passes")]
    pub passes: usize,
}

fn default_passes() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifyEvalConfig {
    pub data: DataSpec,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Plan length; reconstruction always uses DDIM.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub mc_dropout: Option<McDropoutSpec>,
    /// Noising level; defaults to `⌈T/2⌉`.
    #[serde(default)]
    pub start_t: Option<usize>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_shuffles")]
    pub shuffles: usize,
    #[serde(default)]
    pub image_shape: Option<[usize; 2]>,
    #[serde(default)]
    pub images: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_count() -> usize {
    100
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_shuffles() -> usize {
    DEFAULT_SHUFFLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityConfig {
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_identity_timesteps")]
    pub timesteps: Vec<usize>,
    #[serde(default = "default_identity_samples")]
    pub samples: usize,
    /// Largest accepted z-score; the run fails with a numeric error above it.
    #[serde(default = "default_max_z")]
    pub max_z: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_identity_timesteps() -> Vec<usize> {
    vec![1, 10, 100, 500, 1000]
}
fn default_identity_samples() -> usize {
    100_000
}
fn default_max_z() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default)]
    pub data: Option<DataSpec>,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default = "default_profile_count")]
    pub count: usize,
    /// Only `samples` and `scheme` are used; every step is recorded.
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_profile_count() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub data: Option<DataSpec>,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default = "default_bench_count")]
    pub count: usize,
    /// Monte-Carlo sample counts to time.
    #[serde(default = "default_bench_samples")]
    pub samples: Vec<usize>,
    #[serde(default = "default_bench_window")]
    pub window: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_bench_count() -> usize {
    100
}
fn default_bench_samples() -> Vec<usize> {
    vec![5, 20]
}
fn default_bench_window() -> [f64; 2] {
    crate::uncertainty::DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Train(TrainConfig),
    Sample(SampleConfig),
    Guide(GuideConfig),
    FilterEval(FilterEvalConfig),
    SparsifyEval(SparsifyEvalConfig),
    VerifyIdentity(IdentityConfig),
    Profile(ProfileConfig),
    Bench(BenchConfig),
}

impl RunConfig {
    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::Train(_) => "train",
            RunConfig::Sample(_) => "sample",
            RunConfig::Guide(_) => "guide",
            RunConfig::FilterEval(_) => "filter-eval",
            RunConfig::SparsifyEval(_) => "sparsify-eval",
            RunConfig::VerifyIdentity(_) => "verify-identity",
            RunConfig::Profile(_) => "profile",
            RunConfig::Bench(_) => "bench",
        }
    }

    pub fn seed_mut(&mut self) -> &mut u64 {
        match self {
            RunConfig::Train(c) => &mut c.seed,
            RunConfig::Sample(c) => &mut c.seed,
            RunConfig::Guide(c) => &mut c.seed,
            RunConfig::FilterEval(c) => &mut c.seed,
            RunConfig::SparsifyEval(c) => &mut c.seed,
            RunConfig::VerifyIdentity(c) => &mut c.seed,
            RunConfig::Profile(c) => &mut c.seed,
            RunConfig::Bench(c) => &mut c.seed,
        }
    }

    /// Parse a config document and check that it is meant for `command`.
    pub fn parse(command: &str, text: &str) -> Result<Self> {
        if !COMMANDS.contains(&command) {
            return Err(Error::config(format!("unknown command `{command}`")));
        }
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON: {e}")))?;
        match value.get("command").and_then(|c| c.as_str()) {
            Some(c) if c == command => {}
            Some(c) => {
                return Err(Error::config(format!(
                    "config is for `{c}` but the command is `{command}`"
                )))
            }
            None => return Err(Error::config("config has no \"command\" string")),
        }
        serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))
    }
}

/// Command-line options shared by every command.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Threads from the flag, then the environment, then the hardware count.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{THREADS_ENV}={v} is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(Error::config("thread count must be positive"));
    }
    Ok(n)
}

/// Parse, run and write the manifest. Returns the manifest.
pub fn execute(command: &str, options: &RunOptions) -> Result<RunManifest> {
    let started = crate::io::unix_time();
    let text = String::from_utf8(read_bytes(&options.config)?)
        .map_err(|_| Error::config("config file is not UTF-8"))?;
    let mut config = RunConfig::parse(command, &text)?;
    if let Some(seed) = options.seed {
        *config.seed_mut() = seed;
    }
    let base = options
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let threads = resolve_threads(options.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start {threads} threads: {e}")))?;
    std::fs::create_dir_all(&options.out).map_err(|e| Error::io(&options.out, e))?;
    let ctx = Context {
        base: &base,
        out: &options.out,
    };
    let files = pool.install(|| ctx.run(&config))?;
    let seed = *config.seed_mut();
    let value = serde_json::to_value(&config).expect("config serializes");
    let manifest = RunManifest::new(command, seed, value, started, &options.out, &files)?;
    manifest.write(&options.out)?;
    Ok(manifest)
}

enum Data {
    Dist(GmmDistribution),
    Points(Vec<Vec<f64>>),
}

impl Data {
    fn dim(&self) -> usize {
        match self {
            Data::Dist(d) => d.dim(),
            Data::Points(p) => p[0].len(),
        }
    }

    fn dist(&self) -> Result<&GmmDistribution> {
        match self {
            Data::Dist(d) => Ok(d),
            Data::Points(_) => Err(Error::config("this command needs a mixture, not a point set")),
        }
    }

    /// `count` reference points: exact draws, or the point set itself.
    fn reference(&self, seed: u64, count: usize) -> Vec<Vec<f64>> {
        match self {
            Data::Dist(d) => reference_samples(d, seed, count),
            Data::Points(p) => p.clone(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointsFile {
    points: Vec<Vec<f64>>,
}

struct Context<'a> {
    base: &'a Path,
    out: &'a Path,
}

fn csv_f(v: f64) -> String {
    v.to_string()
}

impl Context<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn load_data(&self, spec: &DataSpec) -> Result<Data> {
        let data = match spec {
            DataSpec::Benchmark(b) => Data::Dist(b.build()?),
            DataSpec::Gmm(g) => Data::Dist(g.clone()),
            DataSpec::GmmFile(p) => {
                let path = self.resolve(p);
                let g: GmmDistribution = serde_json::from_slice(&read_bytes(&path)?)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                Data::Dist(g)
            }
            DataSpec::Points(p) => Data::Points(p.clone()),
            DataSpec::PointsFile(p) => {
                let path = self.resolve(p);
                let bytes = read_bytes(&path)?;
                if bytes.starts_with(crate::io::TENSOR_MAGIC) {
                    Data::Points(read_matrix(&path)?)
                } else {
                    let f: PointsFile = serde_json::from_slice(&bytes)
                        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                    Data::Points(f.points)
                }
            }
        };
        match &data {
            Data::Dist(d) => d.validate()?,
            Data::Points(p) => {
                let d = p.first().map_or(0, Vec::len);
                if d == 0 || p.iter().any(|x| x.len() != d) {
                    return Err(Error::config("point set must be nonempty with a uniform dimension"));
                }
            }
        }
        Ok(data)
    }

    fn load_predictor(
        &self,
        spec: &PredictorSpec,
        data: Option<&Data>,
        schedule: &NoiseSchedule,
    ) -> Result<Box<dyn NoisePredictor>> {
        Ok(match (spec, data) {
            (PredictorSpec::Exact, Some(Data::Dist(d))) => {
                Box::new(GmmPredictor::new(d.clone(), schedule.clone())?)
            }
            (PredictorSpec::Dataset, Some(Data::Points(p))) => {
                Box::new(DatasetPredictor::new(p.clone(), schedule.clone())?)
            }
            (PredictorSpec::Exact, _) => {
                return Err(Error::config("the exact predictor needs `data` to be a mixture"))
            }
            (PredictorSpec::Dataset, _) => {
                return Err(Error::config("the dataset predictor needs `data` to be a point set"))
            }
            (PredictorSpec::Model(dir), _) => {
                let mlp = load_mlp(&self.resolve(dir))?;
                if mlp.config.timesteps != schedule.timesteps() {
                    return Err(Error::config(format!(
                        "model was trained with T = {}, schedule has T = {}",
                        mlp.config.timesteps,
                        schedule.timesteps()
                    )));
                }
                Box::new(mlp)
            }
        })
    }

    fn setup(
        &self,
        data: &Option<DataSpec>,
        predictor: &PredictorSpec,
        schedule: &ScheduleConfig,
    ) -> Result<(Option<Data>, NoiseSchedule, Box<dyn NoisePredictor>)> {
        let schedule = schedule.build()?;
        let data = data.as_ref().map(|d| self.load_data(d)).transpose()?;
        let predictor = self.load_predictor(predictor, data.as_ref(), &schedule)?;
        if let Some(d) = &data {
            if d.dim() != predictor.dim() {
                return Err(Error::config(format!(
                    "data has dimension {}, predictor {}",
                    d.dim(),
                    predictor.dim()
                )));
            }
        }
        Ok((data, schedule, predictor))
    }

    fn run(&self, config: &RunConfig) -> Result<Vec<PathBuf>> {
        match config {
            RunConfig::Train(c) => self.train(c),
            RunConfig::Sample(c) => self.sample(c),
            RunConfig::Guide(c) => self.guide(c),
            RunConfig::FilterEval(c) => self.filter_eval(c),
            RunConfig::SparsifyEval(c) => self.sparsify_eval(c),
            RunConfig::VerifyIdentity(c) => self.verify_identity(c),
            RunConfig::Profile(c) => self.profile(c),
            RunConfig::Bench(c) => self.bench(c),
        }
    }

    fn write_csv(&self, name: &str, table: &CsvTable, files: &mut Vec<PathBuf>) -> Result<()> {
        table.write(&self.out.join(name))?;
        files.push(PathBuf::from(name));
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T, files: &mut Vec<PathBuf>) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        write_bytes(&self.out.join(name), text.as_bytes())?;
        files.push(PathBuf::from(name));
        Ok(())
    }

    fn write_samples(&self, name: &str, rows: &[Vec<f64>], files: &mut Vec<PathBuf>) -> Result<()> {
        write_matrix(&self.out.join(name), rows)?;
        files.push(PathBuf::from(name));
        Ok(())
    }

    fn render(
        &self,
        name: String,
        shape: [usize; 2],
        values: &[f64],
        files: &mut Vec<PathBuf>,
    ) -> Result<()> {
        write_image_map(&self.out.join(&name), shape[0], shape[1], values)?;
        files.push(PathBuf::from(name));
        Ok(())
    }

    fn train(&self, c: &TrainConfig) -> Result<Vec<PathBuf>> {
        let schedule = c.schedule.build()?;
        let data = match self.load_data(&c.data)? {
            Data::Dist(d) => {
                if c.train_samples == 0 {
                    return Err(Error::config("train_samples must be positive"));
                }
                reference_samples(&d, Purpose::Training.root(c.seed), c.train_samples)
            }
            Data::Points(p) => p,
        };
        let mlp_config = MlpConfig {
            seed: c.seed,
            ..c.mlp.clone()
        };
        let (mlp, curve) = train_dsm(&data, &schedule, &mlp_config)?;
        let mut files = save_mlp(self.out, &mlp)?;
        let mut loss = CsvTable::new(["epoch", "loss"]);
        for (e, l) in curve.iter().enumerate() {
            loss.push(csv_row![e, csv_f(*l)])?;
        }
        self.write_csv("loss.csv", &loss, &mut files)?;
        Ok(files)
    }

    fn sample(&self, c: &SampleConfig) -> Result<Vec<PathBuf>> {
        let (_, schedule, predictor) = self.setup(&c.data, &c.predictor, &c.schedule)?;
        let sampler = c.sampler.build(&schedule, c.seed)?;
        let d = predictor.dim();
        let starts = prior_draws(c.seed, c.count, d);
        let mut files = Vec::new();

        let (samples, scores) = match &c.uncertainty {
            None => {
                let trajs = crate::experiment::sample_batch(&*predictor, &schedule, &sampler, &starts)?;
                let nfe: Vec<u64> = trajs.iter().map(|t| t.nfe).collect();
                (trajs.into_iter().map(|t| t.final_sample).collect::<Vec<_>>(), nfe_only(nfe))
            }
            Some(u) => {
                u.validate()?;
                let source = Perturbation::from(u);
                let steps = sampler.plan.window_indices(u.window[0], u.window[1]);
                let scored = scored_batch(&*predictor, &schedule, &sampler, &source, &steps, None, &starts)?;
                let maps = self.window_maps(&*predictor, &schedule, &sampler, &source, &steps, &starts, c.images)?;
                let rows = scored
                    .iter()
                    .map(|s| (s.nfe, Some(s.score)))
                    .collect::<Vec<_>>();
                if let Some(shape) = c.image_shape {
                    for (i, m) in maps.iter().enumerate() {
                        self.render(format!("images/uncertainty_{i:04}.pgm"), shape, m, &mut files)?;
                    }
                }
                (scored.into_iter().map(|s| s.sample).collect(), rows)
            }
        };
        self.write_samples("samples.udt", &samples, &mut files)?;
        let mut table = CsvTable::new(["sample", "nfe", "uncertainty"]);
        for (i, (nfe, score)) in scores.iter().enumerate() {
            table.push(csv_row![i, nfe, score.map(csv_f).unwrap_or_default()])?;
        }
        self.write_csv("samples.csv", &table, &mut files)?;
        if let Some(shape) = c.image_shape {
            for (i, s) in samples.iter().take(c.images).enumerate() {
                self.render(format!("images/sample_{i:04}.pgm"), shape, s, &mut files)?;
            }
        }
        for (i, start) in starts.iter().enumerate().take(c.trajectories.min(c.count)) {
            let cfg = SamplerConfig {
                record_states: true,
                ..sampler.with_stream(i as u64)
            };
            let traj = crate::sampler::run_sampler(&*predictor, &schedule, &cfg, start)?;
            let dir = format!("trajectories/{i:04}");
            for f in write_trajectory(&self.out.join(&dir), &traj)? {
                files.push(Path::new(&dir).join(f));
            }
        }
        Ok(files)
    }

    /// Accumulated window maps of the first `count` samples (for rendering).
    #[allow(clippy::too_many_arguments)]
    fn window_maps(
        &self,
        predictor: &dyn NoisePredictor,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
        source: &dyn UncertaintySource,
        steps: &[usize],
        starts: &[Vec<f64>],
        count: usize,
    ) -> Result<Vec<Vec<f64>>> {
        (0..count.min(starts.len()))
            .map(|i| {
                let mut rec = UncertaintyRecorder::on_steps(source, steps.to_vec());
                crate::sampler::run_sampler_with_hooks(
                    predictor,
                    schedule,
                    &sampler.with_stream(i as u64),
                    &starts[i],
                    &mut [&mut rec],
                )?;
                Ok(rec.accumulated().unwrap_or_else(|| vec![0.0; predictor.dim()]))
            })
            .collect()
    }

    fn guide(&self, c: &GuideConfig) -> Result<Vec<PathBuf>> {
        let (_, schedule, predictor) = self.setup(&c.data, &c.predictor, &c.schedule)?;
        let sampler = c.sampler.build(&schedule, c.seed)?;
        let d = predictor.dim();
        let mut guidance = c.guidance.clone();
        guidance.validate()?;
        let mut files = Vec::new();
        if let Some(n) = c.calibrate {
            if n == 0 {
                return Err(Error::config("calibration pool must be nonempty"));
            }
            let pool_seed = Purpose::Reference.root(c.seed);
            let source = Perturbation {
                scheme: crate::uncertainty::PerturbationScheme::Diffusion,
                samples: guidance.samples,
            };
            let starts = prior_draws(pool_seed, n, d);
            let steps: Vec<usize> = (0..sampler.plan.len()).collect();
            let pool_sampler = SamplerConfig {
                seed: pool_seed,
                ..sampler.clone()
            };
            let pool = crate::experiment::map_batch(&*predictor, &schedule, &pool_sampler, &source, &steps, &starts)?;
            let thresholds = calibrate_thresholds(&pool, guidance.percentile)?;
            let mut table = CsvTable::new(["step", "t", "threshold"]);
            for (s, th) in thresholds.iter().enumerate() {
                table.push(csv_row![s, sampler.plan.steps()[s], csv_f(*th)])?;
            }
            self.write_csv("thresholds.csv", &table, &mut files)?;
            guidance.threshold = ThresholdMode::Calibrated { thresholds };
        }
        let starts = prior_draws(c.seed, c.count, d);
        let runs = guided_batch(&*predictor, &schedule, &sampler, &guidance, &starts)?;
        let samples: Vec<Vec<f64>> = runs.iter().map(|(t, _)| t.final_sample.clone()).collect();
        self.write_samples("samples.udt", &samples, &mut files)?;
        let mut per_sample = CsvTable::new(["sample", "nfe"]);
        let mut log = CsvTable::new(["sample", "step", "t", "masked", "uncertainty"]);
        for (i, (traj, steps)) in runs.iter().enumerate() {
            per_sample.push(csv_row![i, traj.nfe])?;
            for g in steps {
                log.push(csv_row![i, g.step, g.map.t, g.masked, csv_f(g.map.total())])?;
            }
        }
        self.write_csv("samples.csv", &per_sample, &mut files)?;
        self.write_csv("guidance.csv", &log, &mut files)?;
        if let Some(shape) = c.image_shape {
            for (i, (traj, steps)) in runs.iter().enumerate().take(c.images) {
                self.render(format!("images/sample_{i:04}.pgm"), shape, &traj.final_sample, &mut files)?;
                for g in steps {
                    let threshold = match &guidance.threshold {
                        ThresholdMode::PerStepPercentile => percentile(&g.map.values, guidance.percentile),
                        ThresholdMode::Calibrated { thresholds } => thresholds[g.step],
                    };
                    let mask: Vec<f64> = mask_above(&g.map.values, threshold)
                        .into_iter()
                        .map(|m| if m { 1.0 } else { 0.0 })
                        .collect();
                    self.render(format!("images/mask_{i:04}_{:04}.pgm", g.step), shape, &mask, &mut files)?;
                }
            }
        }
        Ok(files)
    }

    fn filter_eval(&self, c: &FilterEvalConfig) -> Result<Vec<PathBuf>> {
        let (data, schedule, predictor) = self.setup(&Some(c.data.clone()), &c.predictor, &c.schedule)?;
        let data = data.expect("data is required");
        c.uncertainty.validate()?;
        if c.pool == 0 || c.keep == 0 || c.keep > c.pool {
            return Err(Error::config("need 0 < keep <= pool"));
        }
        let sampler = c.sampler.build(&schedule, c.seed)?;
        let source = Perturbation::from(&c.uncertainty);
        let steps = sampler.plan.window_indices(c.uncertainty.window[0], c.uncertainty.window[1]);
        let starts = prior_draws(c.seed, c.pool, predictor.dim());
        let pool = scored_batch(
            &*predictor,
            &schedule,
            &sampler,
            &source,
            &steps,
            c.guidance.as_ref(),
            &starts,
        )?;
        let scores: Vec<f64> = pool.iter().map(|s| s.score).collect();
        let kept = filter_pool(&scores, c.keep as f64 / c.pool as f64)?;
        let mut order: Vec<usize> = (0..c.pool).collect();
        Purpose::Shuffle.stream(c.seed, 0).shuffle(&mut order);
        let mut random: Vec<usize> = order[..kept.len()].to_vec();
        random.sort_unstable();
        let reference = data.reference(Purpose::Reference.root(c.seed), c.reference);
        let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| pool[i].sample.clone()).collect() };
        let all: Vec<Vec<f64>> = pool.iter().map(|s| s.sample.clone()).collect();

        let mut files = Vec::new();
        let mut table = CsvTable::new(["set", "size", "energy_distance"]);
        table.push(csv_row!["all", all.len(), csv_f(energy_distance(&all, &reference)?)])?;
        table.push(csv_row!["uncertainty", kept.len(), csv_f(energy_distance(&pick(&kept), &reference)?)])?;
        table.push(csv_row!["random", random.len(), csv_f(energy_distance(&pick(&random), &reference)?)])?;
        self.write_csv("filter.csv", &table, &mut files)?;
        let mut per = CsvTable::new(["sample", "uncertainty", "kept", "random"]);
        for (i, s) in scores.iter().enumerate() {
            per.push(csv_row![
                i,
                csv_f(*s),
                u8::from(kept.binary_search(&i).is_ok()),
                u8::from(random.binary_search(&i).is_ok())
            ])?;
        }
        self.write_csv("pool.csv", &per, &mut files)?;
        self.write_samples("pool.udt", &all, &mut files)?;
        Ok(files)
    }

    fn sparsify_eval(&self, c: &SparsifyEvalConfig) -> Result<Vec<PathBuf>> {
        let (data, schedule, predictor) = self.setup(&Some(c.data.clone()), &c.predictor, &c.schedule)?;
        let data = data.expect("data is required");
        c.uncertainty.validate()?;
        if c.test_count == 0 {
            return Err(Error::config("test_count must be positive"));
        }
        let test = match &data {
            Data::Dist(d) => reference_samples(d, Purpose::Reference.root(c.seed), c.test_count),
            Data::Points(p) => p.iter().take(c.test_count).cloned().collect(),
        };
        let ours = Perturbation::from(&c.uncertainty);
        let dropout_model = c
            .mc_dropout
            .as_ref()
            .map(|m| load_mlp(&self.resolve(&m.model)).map(|mlp| (mlp, m.passes)))
            .transpose()?;
        let mcd = dropout_model.as_ref().map(|(mlp, passes)| McDropout { mlp, passes: *passes });
        let mut sources: Vec<&dyn UncertaintySource> = vec![&ours];
        let mut names = vec!["ours"];
        if let Some(m) = &mcd {
            sources.push(m);
            names.push("mc_dropout");
        }
        let config = ReconstructionConfig {
            plan: TimestepPlan::uniform(schedule.timesteps(), c.steps)?,
            window: c.uncertainty.window,
            start_t: c.start_t,
            bins: c.bins,
            shuffles: c.shuffles,
            seed: c.seed,
        };
        let report = reconstruction_eval(&*predictor, &schedule, &test, &sources, &config)?;

        let mut files = Vec::new();
        let mut per = CsvTable::new(["image", "source", "rmse", "ause", "aurg", "ause_random"]);
        for (i, im) in report.images.iter().enumerate() {
            for (k, s) in im.scores.iter().enumerate() {
                per.push(csv_row![i, names[k], csv_f(im.rmse), csv_f(s.ause), csv_f(s.aurg), csv_f(s.ause_random)])?;
            }
        }
        self.write_csv("sparsify.csv", &per, &mut files)?;
        let mut summary = CsvTable::new(["source", "ause", "aurg", "ause_random", "mean_rmse"]);
        for (k, s) in report.mean_scores.iter().enumerate() {
            summary.push(csv_row![
                names[k],
                csv_f(s.ause),
                csv_f(s.aurg),
                csv_f(s.ause_random),
                csv_f(report.mean_rmse)
            ])?;
        }
        self.write_csv("summary.csv", &summary, &mut files)?;
        let errors: Vec<Vec<f64>> = report.images.iter().map(|im| im.abs_error.clone()).collect();
        self.write_samples("errors.udt", &errors, &mut files)?;
        for (k, name) in names.iter().enumerate() {
            let maps: Vec<Vec<f64>> = report.images.iter().map(|im| im.uncertainty[k].clone()).collect();
            self.write_samples(&format!("uncertainty_{name}.udt"), &maps, &mut files)?;
        }
        if let Some(shape) = c.image_shape {
            for (i, im) in report.images.iter().enumerate().take(c.images) {
                self.render(format!("images/error_{i:04}.pgm"), shape, &im.abs_error, &mut files)?;
                for (k, name) in names.iter().enumerate() {
                    self.render(format!("images/{name}_{i:04}.pgm"), shape, &im.uncertainty[k], &mut files)?;
                }
            }
        }
        Ok(files)
    }

    fn verify_identity(&self, c: &IdentityConfig) -> Result<Vec<PathBuf>> {
        let schedule = c.schedule.build()?;
        let data = self.load_data(&c.data)?;
        let dist = data.dist()?;
        if c.timesteps.is_empty() {
            return Err(Error::config("no timesteps to check"));
        }
        let mut reports = Vec::new();
        for (k, &t) in c.timesteps.iter().enumerate() {
            let mut rng = RngStream::new(Purpose::Reference.root(c.seed), k as u64);
            reports.push(fisher_identity_check(dist, &schedule, t, c.samples, &mut rng)?);
        }
        let mut files = Vec::new();
        let mut table = CsvTable::new(["t", "axis", "lhs", "rhs", "se_lhs", "se_rhs", "se_diff", "z"]);
        for r in &reports {
            for i in 0..r.lhs.len() {
                let z = if r.se_diff[i] > 0.0 {
                    (r.lhs[i] - r.rhs[i]).abs() / r.se_diff[i]
                } else {
                    0.0
                };
                table.push(csv_row![
                    r.t,
                    i,
                    csv_f(r.lhs[i]),
                    csv_f(r.rhs[i]),
                    csv_f(r.se_lhs[i]),
                    csv_f(r.se_rhs[i]),
                    csv_f(r.se_diff[i]),
                    csv_f(z)
                ])?;
            }
        }
        self.write_csv("identity.csv", &table, &mut files)?;
        self.write_json("identity.json", &reports, &mut files)?;
        let worst = reports.iter().map(|r| r.max_z).fold(0.0, f64::max);
        if worst >= c.max_z {
            return Err(Error::numeric(format!(
                "identity check failed: max z-score {worst:.3} >= {}",
                c.max_z
            )));
        }
        Ok(files)
    }

    fn profile(&self, c: &ProfileConfig) -> Result<Vec<PathBuf>> {
        let (_, schedule, predictor) = self.setup(&c.data, &c.predictor, &c.schedule)?;
        c.uncertainty.validate()?;
        let sampler = c.sampler.build(&schedule, c.seed)?;
        let starts = prior_draws(c.seed, c.count, predictor.dim());
        let source = Perturbation::from(&c.uncertainty);
        let totals = step_profile(&*predictor, &schedule, &sampler, &source, &starts)?;
        let (mean, std) = uncertainty_profile(&totals)?;
        let mut files = Vec::new();
        let mut table = CsvTable::new(["step", "t", "progress", "mean", "std"]);
        for s in 0..mean.len() {
            table.push(csv_row![
                s,
                sampler.plan.steps()[s],
                csv_f(s as f64 / mean.len() as f64),
                csv_f(mean[s]),
                csv_f(std[s])
            ])?;
        }
        self.write_csv("profile.csv", &table, &mut files)?;
        self.write_samples("profile.udt", &totals, &mut files)?;
        let peak = argmax(&std).expect("nonempty plan");
        let summary = serde_json::json!({
            "steps": mean.len(),
            "argmax_std_step": peak,
            "argmax_std_progress": peak as f64 / mean.len() as f64,
        });
        self.write_json("profile.json", &summary, &mut files)?;
        Ok(files)
    }

    fn bench(&self, c: &BenchConfig) -> Result<Vec<PathBuf>> {
        let (_, schedule, predictor) = self.setup(&c.data, &c.predictor, &c.schedule)?;
        let sampler = c.sampler.build(&schedule, c.seed)?;
        let starts = prior_draws(c.seed, c.count, predictor.dim());
        let steps = sampler.plan.window_indices(c.window[0], c.window[1]);
        let mut table = CsvTable::new(["mode", "samples", "seconds", "nfe_per_sample"]);
        let clock = Instant::now();
        let plain = crate::experiment::sample_batch(&*predictor, &schedule, &sampler, &starts)?;
        let secs = clock.elapsed().as_secs_f64();
        let nfe = plain.first().map_or(0, |t| t.nfe);
        table.push(csv_row!["plain", 0, csv_f(secs), nfe])?;
        for &m in &c.samples {
            let source = Perturbation {
                scheme: crate::uncertainty::PerturbationScheme::Diffusion,
                samples: m,
            };
            let clock = Instant::now();
            let scored = scored_batch(&*predictor, &schedule, &sampler, &source, &steps, None, &starts)?;
            let secs = clock.elapsed().as_secs_f64();
            let nfe = scored.first().map_or(0, |s| s.nfe);
            table.push(csv_row!["uncertainty", m, csv_f(secs), nfe])?;
        }
        let mut files = Vec::new();
        self.write_csv("bench.csv", &table, &mut files)?;
        Ok(files)
    }
}

fn nfe_only(nfe: Vec<u64>) -> Vec<(u64, Option<f64>)> {
    nfe.into_iter().map(|n| (n, None)).collect()
}
