use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cipherforest::annotator::{
    self, CloudBundle, ImageRecord, SetupConfig, UserState, UserStateFile,
};
use cipherforest::features::PartDims;
use cipherforest::harness::{self, EvalReport, SweepGrid, SyntheticSpec};
use cipherforest::ive::IveParams;
use cipherforest::rkdf::{BudgetMode, EncryptedForest, Schedule, SearchConfig};
use cipherforest::{wire, Error};

#[derive(Parser)]
#[command(
    name = "cipherforest",
    version,
    about = "Encrypted kd-forest image annotation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Approximation power: percent of nodes a search may visit.
    #[arg(long, global = true, default_value_t = 100.0)]
    ap: f64,
    /// PCA strength X (texture parts reduced to dim / X).
    #[arg(long, global = true, default_value_t = 32)]
    pca: usize,
    #[arg(long, global = true, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, global = true, default_value_t = 100.0)]
    gamma: f64,
    #[arg(long, global = true, default_value_t = 10)]
    trees: usize,
    #[arg(long = "queue-size", global = true, default_value_t = 10)]
    queue_size: usize,
    #[arg(long, global = true, value_enum, default_value_t = Toggle::On)]
    noise: Toggle,
    /// Corpus file (JSON lines).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Working directory for keys, forest, requests and results.
    #[arg(long, global = true, default_value = "cf-out")]
    out: PathBuf,
    /// Count comparisons per tree instead of against the shared visited set.
    #[arg(long = "per-tree-budget", global = true)]
    per_tree_budget: bool,
    /// Search trees on separate threads.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic clustered corpus.
    Gen {
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long)]
        clusters: Option<usize>,
        /// Use the nominal 48/48/48/256/256/4096/4096 part sizes.
        #[arg(long)]
        nominal: bool,
        #[arg(long, default_value_t = 0.05)]
        spread: f64,
    },
    /// Build keys, encrypted forest and user state from the corpus.
    Setup,
    /// Encrypt an annotation request for one image.
    Request {
        /// Id of a corpus image to use as the query.
        #[arg(long, conflicts_with = "query")]
        image: Option<u32>,
        /// JSON-lines file whose first record is the query.
        #[arg(long)]
        query: Option<PathBuf>,
        /// Fixed request scalar instead of a fresh random one.
        #[arg(long = "r-s")]
        r_s: Option<i64>,
    },
    /// Run the cloud-side search for a request file.
    Annotate {
        #[arg(long)]
        request: PathBuf,
    },
    /// Recover distances and rank keywords from a result file.
    Recover {
        #[arg(long)]
        result: PathBuf,
        #[arg(long = "top-k", default_value_t = annotator::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Evaluate recall and oracle agreement over queries.
    Eval {
        /// Query file; defaults to the first corpus images.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long = "query-count", default_value_t = 20)]
        query_count: usize,
        #[arg(long = "top-k", default_value_t = annotator::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Sweep approximation power and feature parameters.
    Sweep {
        #[arg(
            long = "ap-grid",
            value_delimiter = ',',
            default_value = "100,50,25,10,2.5"
        )]
        ap_grid: Vec<f64>,
        #[arg(long = "pca-grid", value_delimiter = ',')]
        pca_grid: Vec<usize>,
        #[arg(long = "alpha-grid", value_delimiter = ',')]
        alpha_grid: Vec<f64>,
        #[arg(long = "gamma-grid", value_delimiter = ',')]
        gamma_grid: Vec<f64>,
        #[arg(long = "query-count", default_value_t = 20)]
        query_count: usize,
        #[arg(long = "top-k", default_value_t = annotator::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Time setup, request, search and a linear scan.
    Bench,
}

/// Raised when encrypted results disagree with the plaintext oracle.
#[derive(Debug)]
struct OracleMismatch(String);

impl std::fmt::Display for OracleMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "oracle mismatch: {}", self.0)
    }
}

impl std::error::Error for OracleMismatch {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<OracleMismatch>().is_some() {
                return ExitCode::from(3);
            }
            match e.downcast_ref::<Error>() {
                Some(Error::Overflow(_) | Error::Seal(_)) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

impl Global {
    fn setup_config(&self) -> SetupConfig {
        let mut cfg = SetupConfig {
            seed: self.seed,
            trees: self.trees,
            queue_size: self.queue_size,
            noise: self.noise == Toggle::On,
            ..SetupConfig::default()
        };
        cfg.features.pca_strength = self.pca;
        cfg.features.alpha = self.alpha;
        cfg.features.gamma = self.gamma;
        cfg
    }

    fn search_config(&self) -> SearchConfig {
        SearchConfig {
            ap_percent: self.ap,
            queue_size: self.queue_size,
            budget_mode: if self.per_tree_budget {
                BudgetMode::PerTree
            } else {
                BudgetMode::Shared
            },
            schedule: if self.parallel {
                Schedule::Parallel
            } else {
                Schedule::RoundRobin
            },
        }
    }

    fn corpus_path(&self) -> PathBuf {
        self.corpus
            .clone()
            .unwrap_or_else(|| self.out.join("corpus.jsonl"))
    }

    fn load_corpus(&self) -> anyhow::Result<Vec<ImageRecord>> {
        let path = self.corpus_path();
        let f = File::open(&path)
            .map_err(Error::from)
            .with_context(|| format!("opening corpus {}", path.display()))?;
        Ok(harness::read_corpus(BufReader::new(f))?)
    }

    fn user_dir(&self) -> PathBuf {
        self.out.join("user")
    }

    fn cloud_dir(&self) -> PathBuf {
        self.out.join("cloud")
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let f = File::create(path)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    w.write_all(b"\n").map_err(Error::from)?;
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn save_user(g: &Global, state: &UserState) -> anyhow::Result<()> {
    let mut w = create(&g.user_dir().join("keys.ive"))?;
    annotator::write_keys(&mut w, &state.keys, &state.params.ive)?;
    w.flush().map_err(Error::from)?;
    save_user_state(g, state)
}

fn save_user_state(g: &Global, state: &UserState) -> anyhow::Result<()> {
    write_json(&g.user_dir().join("state.json"), &state.to_file())
}

fn load_user(g: &Global) -> anyhow::Result<UserState> {
    let file: UserStateFile =
        serde_json::from_reader(open(&g.user_dir().join("state.json"))?).map_err(Error::from)?;
    let keys = annotator::read_keys(&mut open(&g.user_dir().join("keys.ive"))?)?;
    Ok(UserState::from_file(file, keys)?)
}

fn save_cloud(g: &Global, cloud: &CloudBundle) -> anyhow::Result<()> {
    let dir = g.cloud_dir();
    let mut w = create(&dir.join("forest.rkdf"))?;
    cloud.forest.write_to(&mut w)?;
    w.flush().map_err(Error::from)?;
    let mut w = create(&dir.join("ksk.ive"))?;
    annotator::write_cloud_keys(&mut w, &cloud.keys, &cloud.ive)?;
    w.flush().map_err(Error::from)?;
    write_json(&dir.join("params.json"), &cloud.ive)
}

fn load_cloud(g: &Global) -> anyhow::Result<CloudBundle> {
    let dir = g.cloud_dir();
    let forest = EncryptedForest::read_from(&mut open(&dir.join("forest.rkdf"))?)?;
    let keys = annotator::read_cloud_keys(&mut open(&dir.join("ksk.ive"))?)?;
    let ive: IveParams =
        serde_json::from_reader(open(&dir.join("params.json"))?).map_err(Error::from)?;
    if ive.q != forest.q {
        bail!(Error::Validation(
            "forest and parameters use different moduli".into()
        ));
    }
    Ok(CloudBundle { forest, keys, ive })
}

fn pick_queries(
    records: &[ImageRecord],
    file: Option<&Path>,
    count: usize,
) -> anyhow::Result<Vec<ImageRecord>> {
    match file {
        Some(p) => Ok(harness::read_corpus(open(p)?)?),
        None => {
            if records.is_empty() {
                bail!(Error::EmptyCorpus);
            }
            Ok(records.iter().take(count.max(1)).cloned().collect())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    match cli.cmd {
        Cmd::Gen {
            images,
            clusters,
            nominal,
            spread,
        } => {
            let mut spec = SyntheticSpec::desk(images, g.seed);
            if nominal {
                spec.dims = PartDims::NOMINAL;
            }
            if let Some(c) = clusters {
                spec.clusters = c;
            }
            spec.spread = spread;
            let records = harness::generate(&spec)?;
            let path = g.corpus_path();
            let mut w = create(&path)?;
            harness::write_corpus(&mut w, &records)?;
            w.flush().map_err(Error::from)?;
            println!("wrote {} images to {}", records.len(), path.display());
        }
        Cmd::Setup => {
            let records = g.load_corpus()?;
            let (state, cloud) = annotator::setup(&records, &g.setup_config())?;
            save_user(&g, &state)?;
            save_cloud(&g, &cloud)?;
            println!(
                "setup: {} images, {} trees, m_hat {}, |SF| {}, q {} bits",
                records.len(),
                cloud.forest.trees.len(),
                state.params.m_hat,
                state.split_fields.len(),
                state.params.ive.q.bits()
            );
        }
        Cmd::Request { image, query, r_s } => {
            let mut state = load_user(&g)?;
            let bundle = match (image, query) {
                (Some(id), _) => {
                    let records = g.load_corpus()?;
                    records
                        .into_iter()
                        .find(|r| r.id == id)
                        .ok_or_else(|| {
                            anyhow!(Error::Validation(format!("no image {id} in corpus")))
                        })?
                        .features
                }
                (None, Some(p)) => {
                    harness::read_corpus(open(&p)?)?
                        .into_iter()
                        .next()
                        .ok_or_else(|| anyhow!(Error::Validation("query file is empty".into())))?
                        .features
                }
                (None, None) => bail!(Error::Validation("request needs --image or --query".into())),
            };
            let req = state.make_request(&bundle, r_s)?;
            let path = g.out.join("requests").join(format!("req-{}.bin", req.id));
            let mut w = create(&path)?;
            wire::write_request(&mut w, &req, &state.params.ive.q)?;
            w.flush().map_err(Error::from)?;
            save_user_state(&g, &state)?;
            println!("request {} written to {}", req.id, path.display());
        }
        Cmd::Annotate { request } => {
            let cloud = load_cloud(&g)?;
            let req = wire::read_request(&mut open(&request)?)?;
            let (rs, _) = annotator::cloud_annotate(&cloud, &req, &g.search_config())?;
            let path = g
                .out
                .join("results")
                .join(format!("res-{}.bin", rs.request_id));
            let mut w = create(&path)?;
            wire::write_result(&mut w, &rs)?;
            w.flush().map_err(Error::from)?;
            println!(
                "request {}: {} results, {} inner products, {} nodes visited -> {}",
                rs.request_id,
                rs.entries.len(),
                rs.inner_products,
                rs.visited,
                path.display()
            );
        }
        Cmd::Recover { result, top_k } => {
            let mut state = load_user(&g)?;
            let rs = wire::read_result(&mut open(&result)?)?;
            let recovered = state.consume_results(&rs)?;
            let ranked = annotator::select_keywords(&recovered)?;
            let out = serde_json::json!({
                "request_id": rs.request_id,
                "images": recovered,
                "ranked": ranked,
                "top_k": annotator::top_k(&ranked, top_k),
            });
            write_json(
                &g.out
                    .join("results")
                    .join(format!("keywords-{}.json", rs.request_id)),
                &out,
            )?;
            save_user_state(&g, &state)?;
            println!("{}", annotator::top_k(&ranked, top_k).join(" "));
        }
        Cmd::Eval {
            queries,
            query_count,
            top_k,
        } => {
            let records = g.load_corpus()?;
            let state = load_user(&g)?;
            let cloud = load_cloud(&g)?;
            let qs = pick_queries(&records, queries.as_deref(), query_count)?;
            let search = g.search_config();
            let (row, outcomes) = harness::evaluate(&state, &cloud, &records, &qs, &search, top_k)?;
            let report = EvalReport {
                rows: vec![row.clone()],
                queries: outcomes,
            };
            write_json(&g.out.join("eval").join("report.json"), &report)?;
            let mut w = create(&g.out.join("eval").join("report.csv"))?;
            report.write_csv(&mut w)?;
            w.flush().map_err(Error::from)?;
            print!("{}", report.summary());
            if row.distance_mismatches > 0 {
                bail!(OracleMismatch(format!(
                    "{} recovered distances outside tolerance",
                    row.distance_mismatches
                )));
            }
            let exact = search.ap_percent >= 100.0 && state.params.obf.eps_max == 0;
            if exact && row.oracle_overlap < 1.0 {
                bail!(OracleMismatch(format!(
                    "full-power overlap {:.3} below 1",
                    row.oracle_overlap
                )));
            }
        }
        Cmd::Sweep {
            ap_grid,
            pca_grid,
            alpha_grid,
            gamma_grid,
            query_count,
            top_k,
        } => {
            let records = g.load_corpus()?;
            let qs = pick_queries(&records, None, query_count)?;
            let or = |v: Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v };
            let grid = SweepGrid {
                ap: ap_grid,
                pca: if pca_grid.is_empty() {
                    vec![g.pca]
                } else {
                    pca_grid
                },
                alpha: or(alpha_grid, g.alpha),
                gamma: or(gamma_grid, g.gamma),
            };
            let report = harness::sweep(
                &records,
                &qs,
                &g.setup_config(),
                &g.search_config(),
                &grid,
                top_k,
                true,
            )?;
            let mut w = create(&g.out.join("sweep").join("report.csv"))?;
            report.write_csv(&mut w)?;
            w.flush().map_err(Error::from)?;
            print!("{}", report.summary());
        }
        Cmd::Bench => {
            let records = g.load_corpus()?;
            let report = harness::bench(&records, &g.setup_config(), &g.search_config())?;
            write_json(&g.out.join("bench.json"), &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(Error::from)?
            );
        }
    }
    Ok(())
}
