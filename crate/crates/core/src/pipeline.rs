//! Run configuration and the artifact-producing pipeline steps.
//!
//! Every step reads its inputs from and writes its outputs to the run's
//! output directory, so the steps can be run one at a time from the command
//! line or chained in-process with [`run_pipeline`]. Component seeds are
//! derived from the master seed with the labels `graph`, `panel`, `ising`,
//! `rl/<member>` and `eval`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate_panel, Panel, SisConfig};
use crate::error::{Error, Result};
use crate::eval::{rollout_all, EvalReport};
use crate::graph::{detect_communities, gen_sbm, load_edge_list, BinPartition, Graph};
use crate::ising::{fit_emvs_design, sample_posterior_with, EmvsOptions, HmcOptions, IsingDesign, IsingParams, PriorSpec};
use crate::policies::{Policy, PolicySpec};
use crate::rl::{
    bonus_beta_from_radius, build_transitions, stage_datasets, train_cql_traced, train_pevi, CqlHyper, FeatureMap,
    StateMode, TrainSummary, TransitionSet,
};
use crate::rng::{derive_indexed, derive_seed};
use crate::verify::{run_all, VerifyReport};

/// File names inside a run directory.
pub mod artifacts {
    pub const GRAPH: &str = "graph.json";
    pub const PARTITION: &str = "partition.csv";
    pub const PANEL: &str = "panel.jsonl";
    pub const FIT: &str = "fit.json";
    pub const DRAWS: &str = "draws.json";
    pub const PARAMS: &str = "params.json";
    pub const TRANSITIONS: &str = "transitions.json";
    pub const MODEL: &str = "model.json";
    pub const TRAIN_SUMMARY: &str = "train_summary.json";
    pub const EVAL_JSON: &str = "eval.json";
    pub const EVAL_CSV: &str = "eval.csv";
    pub const VERIFY: &str = "verify.json";

    pub fn member_params(p: usize) -> String {
        format!("members/params_{p}.json")
    }

    pub fn member_transitions(p: usize) -> String {
        format!("members/transitions_{p}.json")
    }

    pub fn member_model(p: usize) -> String {
        format!("members/model_{p}.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    /// Stochastic block model; blocks become the bins.
    Sbm { sizes: Vec<usize>, p_in: f64, p_out: f64 },
    /// `src,dst` edge list. Bins come from a `node,bin` file keyed by the
    /// original ids, or from edge-betweenness community detection.
    EdgeList {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        partition: Option<PathBuf>,
        #[serde(default = "one")]
        min_community_size: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisSpec {
    pub spread: Vec<f64>,
    pub churn: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    pub periods: usize,
    #[serde(default = "random_bin")]
    pub logging_policy: PolicySpec,
}

fn random_bin() -> PolicySpec {
    PolicySpec::RandomBin {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Point estimate; one learned policy.
    #[default]
    Emvs,
    /// Posterior draws; one policy per draw combined by majority vote.
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsingSpec {
    pub prior: PriorSpec,
    pub estimator: Estimator,
    /// Ensemble size `P` under MCMC.
    pub draws: usize,
    pub tune: usize,
    /// Sampler iterations per kept draw.
    pub thin: usize,
    pub emvs: EmvsOptions,
    pub hmc: HmcOptions,
    pub state: StateMode,
}

impl Default for IsingSpec {
    fn default() -> Self {
        Self {
            prior: PriorSpec::default(),
            estimator: Estimator::Emvs,
            draws: 10,
            tune: 500,
            thin: 5,
            emvs: EmvsOptions::default(),
            hmc: HmcOptions::default(),
            state: StateMode::QIsing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Cql,
    Pevi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeviSpec {
    pub horizon: usize,
    pub lambda: f64,
    /// Fixed bonus multiplier; derived from the confidence radius when absent.
    pub bonus_beta: Option<f64>,
    pub c_beta: f64,
    pub delta: f64,
}

impl Default for PeviSpec {
    fn default() -> Self {
        Self { horizon: 25, lambda: 1.0, bonus_beta: None, c_beta: 1.0, delta: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSpec {
    pub algorithm: Algorithm,
    pub cql: CqlHyper,
    pub pevi: PeviSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPolicy {
    pub name: String,
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub horizon: usize,
    pub n_runs: usize,
    pub policies: Vec<NamedPolicy>,
    /// Also evaluate the trained policy under the name `q_ising`.
    pub learned: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        let named = |name: &str, policy| NamedPolicy { name: name.into(), policy };
        Self {
            horizon: 25,
            n_runs: 50,
            policies: vec![
                named("random_bin", PolicySpec::RandomBin {}),
                named("degree", PolicySpec::Degree {}),
                named("degree_bin", PolicySpec::DegreeBin {}),
                named("lir", PolicySpec::Lir {}),
            ],
            learned: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub graph: GraphSpec,
    pub sis: SisSpec,
    pub panel: PanelSpec,
    #[serde(default)]
    pub ising: IsingSpec,
    #[serde(default)]
    pub rl: RlSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Range checks that do not need the network.
    pub fn validate(&self) -> Result<()> {
        match &self.graph {
            GraphSpec::Sbm { sizes, p_in, p_out } => {
                if sizes.is_empty() || sizes.contains(&0) {
                    return Err(Error::invalid("sbm sizes must be nonempty and positive"));
                }
                if !(0.0..=1.0).contains(p_in) || !(0.0..=1.0).contains(p_out) {
                    return Err(Error::invalid("sbm probabilities must lie in [0, 1]"));
                }
                if self.sis.spread.len() != sizes.len() {
                    return Err(Error::invalid("sis rates need one entry per sbm block"));
                }
            }
            GraphSpec::EdgeList { path, partition, .. } => {
                for p in std::iter::once(path).chain(partition) {
                    if !p.exists() {
                        return Err(Error::MissingArtifact { path: p.clone(), reason: "file not found".into() });
                    }
                }
            }
        }
        if self.sis.spread.len() != self.sis.churn.len() {
            return Err(Error::invalid("spread and churn need the same length"));
        }
        if self.sis.spread.iter().chain(&self.sis.churn).any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("sis rates must lie in [0, 1]"));
        }
        if self.panel.periods < 2 {
            return Err(Error::invalid("panel needs at least two periods"));
        }
        self.ising.prior.validate()?;
        if self.ising.draws == 0 || self.ising.thin == 0 {
            return Err(Error::invalid("draws and thin must be positive"));
        }
        self.rl.cql.validate()?;
        let pevi = &self.rl.pevi;
        if pevi.horizon == 0 || !(pevi.lambda > 0.0) || pevi.bonus_beta.is_some_and(|b| !(b >= 0.0)) {
            return Err(Error::invalid("pevi needs a positive horizon and lambda and a nonnegative bonus"));
        }
        if self.eval.horizon == 0 || self.eval.n_runs == 0 {
            return Err(Error::invalid("eval horizon and n_runs must be positive"));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Ensemble size: `P` under MCMC, otherwise one.
    pub fn members(&self) -> usize {
        match self.ising.estimator {
            Estimator::Emvs => 1,
            Estimator::Mcmc => self.ising.draws,
        }
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut file = BufWriter::new(fs::File::create(&tmp)?);
        file.write_all(bytes)?;
        file.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file =
        fs::File::open(path).map_err(|e| Error::MissingArtifact { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    n: usize,
    edges: Vec<(usize, usize)>,
}

/// Network and bins of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub graph: Graph,
    pub partition: BinPartition,
}

fn build_network(config: &RunConfig) -> Result<Network> {
    match &config.graph {
        GraphSpec::Sbm { sizes, p_in, p_out } => {
            let (graph, partition) = gen_sbm(sizes, *p_in, *p_out, derive_seed(config.seed, "graph"))?;
            Ok(Network { graph, partition })
        }
        GraphSpec::EdgeList { path, partition, min_community_size } => {
            let file = fs::File::open(path)
                .map_err(|e| Error::MissingArtifact { path: path.clone(), reason: e.to_string() })?;
            let list = load_edge_list(BufReader::new(file))?;
            let partition = match partition {
                Some(p) => {
                    let file = fs::File::open(p)
                        .map_err(|e| Error::MissingArtifact { path: p.clone(), reason: e.to_string() })?;
                    let by_original = BinPartition::read(BufReader::new(file))?;
                    let bins = list
                        .original_ids
                        .iter()
                        .map(|&id| {
                            usize::try_from(id)
                                .ok()
                                .filter(|&i| i < by_original.n())
                                .map(|i| by_original.bin_of(i))
                                .ok_or_else(|| Error::invalid(format!("node {id} missing from partition file")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    BinPartition::new(bins)?
                }
                None => detect_communities(&list.graph, *min_community_size)?,
            };
            Ok(Network { graph: list.graph, partition })
        }
    }
}

pub fn load_network(config: &RunConfig) -> Result<Network> {
    let file: GraphFile = read_json(&config.path(artifacts::GRAPH))?;
    let graph = Graph::new(file.n, file.edges)?;
    let part_path = config.path(artifacts::PARTITION);
    let reader = fs::File::open(&part_path)
        .map_err(|e| Error::MissingArtifact { path: part_path.clone(), reason: e.to_string() })?;
    let partition = BinPartition::read(BufReader::new(reader))?;
    if partition.n() != graph.n() {
        return Err(Error::invalid("partition and graph sizes differ"));
    }
    Ok(Network { graph, partition })
}

fn sis_config(config: &RunConfig, network: &Network) -> Result<SisConfig> {
    if config.sis.spread.len() != network.partition.k() {
        return Err(Error::invalid(format!(
            "{} sis rates for {} bins",
            config.sis.spread.len(),
            network.partition.k()
        )));
    }
    SisConfig::new(
        network.graph.clone(),
        network.partition.clone(),
        config.sis.spread.clone(),
        config.sis.churn.clone(),
    )
}

/// Builds the network and writes `graph.json` and `partition.csv`.
pub fn cmd_gen(config: &RunConfig) -> Result<Network> {
    let network = build_network(config)?;
    sis_config(config, &network)?;
    write_json(
        &config.path(artifacts::GRAPH),
        &GraphFile { n: network.graph.n(), edges: network.graph.edges().to_vec() },
    )?;
    let mut buf = Vec::new();
    network.partition.write(&mut buf)?;
    write_atomic(&config.path(artifacts::PARTITION), &buf)?;
    log::info!("network: {} nodes, {} edges, {} bins", network.graph.n(), network.graph.edge_count(), network.partition.k());
    Ok(network)
}

pub fn load_panel(config: &RunConfig) -> Result<Panel> {
    let path = config.path(artifacts::PANEL);
    let file =
        fs::File::open(&path).map_err(|e| Error::MissingArtifact { path: path.clone(), reason: e.to_string() })?;
    Panel::read_jsonl(BufReader::new(file))
}

/// Simulates the logged panel under the logging policy.
pub fn cmd_simulate(config: &RunConfig) -> Result<Panel> {
    let network = load_network(config)?;
    let sis = sis_config(config, &network)?;
    let logging = config.panel.logging_policy.load(&network.graph, &network.partition, &config.out_dir)?;
    let panel = generate_panel(&sis, &logging, config.panel.periods, derive_seed(config.seed, "panel"), None)?;
    let mut buf = Vec::new();
    panel.write_jsonl(&mut buf)?;
    write_atomic(&config.path(artifacts::PANEL), &buf)?;
    Ok(panel)
}

/// Parameters of each ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: IsingParams,
    pub members: Vec<IsingParams>,
}

/// EMVS point estimate, plus thinned posterior draws under MCMC. Writes
/// `fit.json` and `params.json`, and under MCMC `draws.json` and one
/// parameter file per member.
pub fn cmd_fit(config: &RunConfig) -> Result<FitOutcome> {
    let network = load_network(config)?;
    let panel = load_panel(config)?;
    let design = IsingDesign::from_panel(&panel, &network.graph, &network.partition)?;
    let spec = &config.ising;
    let fit = fit_emvs_design(&design, &spec.prior, &spec.emvs)?;
    if !fit.converged {
        log::warn!("EMVS stopped after {} iterations without converging", fit.iterations);
    }
    write_json(&config.path(artifacts::FIT), &fit)?;
    write_json(&config.path(artifacts::PARAMS), &fit.params)?;
    let members = match spec.estimator {
        Estimator::Emvs => vec![fit.params.clone()],
        Estimator::Mcmc => {
            let draws = sample_posterior_with(
                &design,
                &spec.prior,
                spec.draws * spec.thin,
                spec.tune,
                derive_seed(config.seed, "ising"),
                &spec.hmc,
                Some(&fit.params),
            )?;
            if draws.flagged {
                log::warn!("{} divergent transitions in {} draws", draws.divergences, draws.draws.len());
            }
            write_json(&config.path(artifacts::DRAWS), &draws)?;
            let kept: Vec<IsingParams> = draws.draws.iter().skip(spec.thin - 1).step_by(spec.thin).cloned().collect();
            for (p, params) in kept.iter().enumerate() {
                write_json(&config.path(&artifacts::member_params(p)), params)?;
            }
            kept
        }
    };
    Ok(FitOutcome { params: fit.params, members })
}

/// One trained member: transitions and the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub member: usize,
    pub transitions: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cql: Option<TrainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bonus_beta: Option<f64>,
}

fn member_paths(config: &RunConfig, p: usize) -> (String, String, String) {
    match config.ising.estimator {
        Estimator::Emvs => (artifacts::PARAMS.into(), artifacts::TRANSITIONS.into(), artifacts::MODEL.into()),
        Estimator::Mcmc => (artifacts::member_params(p), artifacts::member_transitions(p), artifacts::member_model(p)),
    }
}

/// Builds transitions and trains one agent per member, in parallel.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<MemberSummary>> {
    let network = load_network(config)?;
    let panel = load_panel(config)?;
    let summaries = (0..config.members())
        .into_par_iter()
        .map(|p| {
            let (params_path, transitions_path, model_path) = member_paths(config, p);
            let params: Option<IsingParams> = match config.ising.state {
                StateMode::QIsing => Some(read_json(&config.path(&params_path))?),
                StateMode::Observed => None,
            };
            let set = build_transitions(&panel, params.as_ref(), &network.graph, &network.partition, config.ising.state)?;
            write_json(&config.path(&transitions_path), &set)?;
            let seed = derive_indexed(config.seed, "rl", p as u64);
            let mut summary =
                MemberSummary { member: p, transitions: set.transitions.len(), skipped: set.skipped, cql: None, bonus_beta: None };
            match config.rl.algorithm {
                Algorithm::Cql => {
                    let (q, trace) = train_cql_traced(&set.transitions, &config.rl.cql, seed)?;
                    write_json(&config.path(&model_path), &q)?;
                    summary.cql = Some(trace);
                }
                Algorithm::Pevi => {
                    let (policy, beta) = train_pevi_member(config, &set, network.partition.k())?;
                    write_json(&config.path(&model_path), &policy)?;
                    summary.bonus_beta = Some(beta);
                }
            }
            Ok(summary)
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&config.path(artifacts::TRAIN_SUMMARY), &summaries)?;
    Ok(summaries)
}

fn train_pevi_member(config: &RunConfig, set: &TransitionSet, k: usize) -> Result<(crate::rl::PeviPolicy, f64)> {
    let spec = &config.rl.pevi;
    let features = FeatureMap::Bin { k };
    let stages = stage_datasets(&set.transitions, set.periods, spec.horizon)?;
    let beta = match spec.bonus_beta {
        Some(b) => b,
        None => {
            let h = spec.horizon as f64;
            let d = features.dim();
            bonus_beta_from_radius(
                spec.horizon,
                d,
                set.transitions.len(),
                spec.lambda,
                spec.delta,
                h * (d as f64).sqrt(),
                spec.c_beta,
            )?
        }
    };
    Ok((train_pevi(&stages, features, spec.lambda, beta, spec.horizon)?, beta))
}

/// Policy spec of the trained agent (majority vote under MCMC), with paths
/// relative to the run directory.
pub fn learned_policy_spec(config: &RunConfig) -> PolicySpec {
    let member = |p: usize| {
        let (params, _, model) = member_paths(config, p);
        let params = (config.ising.state == StateMode::QIsing).then(|| PathBuf::from(params));
        let model = PathBuf::from(model);
        let state = config.ising.state;
        match config.rl.algorithm {
            Algorithm::Cql => PolicySpec::LearnedQ { model, params, state },
            Algorithm::Pevi => PolicySpec::Pevi { model, params, state },
        }
    };
    match config.ising.estimator {
        Estimator::Emvs => member(0),
        Estimator::Mcmc => PolicySpec::Ensemble { members: (0..config.ising.draws).map(member).collect() },
    }
}

/// Loads every evaluated policy under its report name.
pub fn eval_policies(config: &RunConfig, network: &Network) -> Result<Vec<(String, Policy)>> {
    let mut named: Vec<(String, PolicySpec)> =
        config.eval.policies.iter().map(|p| (p.name.clone(), p.policy.clone())).collect();
    if config.eval.learned {
        named.push(("q_ising".into(), learned_policy_spec(config)));
    }
    named
        .into_iter()
        .map(|(name, spec)| Ok((name, spec.load(&network.graph, &network.partition, &config.out_dir)?)))
        .collect()
}

/// Rolls out every configured policy over the same derived run seeds and
/// writes `eval.json` and `eval.csv`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    let network = load_network(config)?;
    let sis = sis_config(config, &network)?;
    let policies = eval_policies(config, &network)?;
    let report =
        rollout_all(&sis, &policies, config.eval.horizon, config.eval.n_runs, derive_seed(config.seed, "eval"))?;
    write_json(&config.path(artifacts::EVAL_JSON), &report)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&config.path(artifacts::EVAL_CSV), &csv)?;
    Ok(report)
}

/// Network, panel, fit, training and evaluation in one go.
pub fn run_pipeline(config: &RunConfig) -> Result<EvalReport> {
    cmd_gen(config)?;
    cmd_simulate(config)?;
    cmd_fit(config)?;
    cmd_train(config)?;
    cmd_eval(config)
}

/// The full pipeline with posterior draws and a majority-vote policy.
pub fn cmd_ensemble(config: &RunConfig) -> Result<EvalReport> {
    let mut config = config.clone();
    config.ising.estimator = Estimator::Mcmc;
    run_pipeline(&config)
}

/// Runs the verification suite, writing `verify.json` when given a directory.
pub fn cmd_verify(out_dir: Option<&Path>, only: Option<&[String]>) -> Result<VerifyReport> {
    let report = run_all(only);
    if let Some(dir) = out_dir {
        write_json(&dir.join(artifacts::VERIFY), &report)?;
    }
    Ok(report)
}
