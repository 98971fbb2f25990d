use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tabicl::export::{sha256_hex, validate_jsonl, ExportManifest};
use tabicl::prompt::PromptFormat;
use tabicl::runner::{
    finetune_records, plan_seed, render_prompts, run_ablation_grid, run_experiment, write_finetune_jsonl,
    write_report, ExperimentManifest, Missingness, Workspace, ABLATION_SEEDS,
};
use tabicl::select::{import_external_ranking, lasso_path_rank, select_top_p};
use tabicl::split::{make_splits, Partition, SplitAssignment, SplitFractions};
use tabicl::synth;
use tabicl::table::{filter_complete, filter_incomplete, load_table, write_table, FeatureTable, Schema};

#[derive(Parser)]
#[command(name = "tabicl", version, about = "Few-shot tabular classification harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct TableArgs {
    /// Delimited table (CSV).
    #[arg(long)]
    table: PathBuf,
    /// Schema JSON.
    #[arg(long)]
    schema: PathBuf,
}

impl TableArgs {
    fn load(&self) -> Result<FeatureTable> {
        let schema_text = fs::read_to_string(&self.schema).with_context(|| self.schema.display().to_string())?;
        let schema = Schema::from_json(&schema_text)?;
        let file = fs::File::open(&self.table).with_context(|| self.table.display().to_string())?;
        Ok(load_table(BufReader::new(file), &schema)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a table against its schema and print a summary.
    Ingest {
        #[command(flatten)]
        input: TableArgs,
        /// Write the normalized table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified six-way split of the complete-case cohort.
    Split {
        #[command(flatten)]
        input: TableArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        no_stratify: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank features on the train split and keep the top p.
    SelectFeatures {
        #[command(flatten)]
        input: TableArgs,
        /// Split assignment JSON from `split`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        p: usize,
        /// Use an external `feature,score` ranking instead of the LASSO path.
        #[arg(long)]
        external: Option<PathBuf>,
        /// Output directory for ranking.csv and features.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render first-round prompts for the test targets of one seed as JSONL.
    GenPrompts {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Override the manifest's format.
        #[arg(long)]
        format: Option<PromptFormat>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write chat-format fine-tuning JSONL for the train split, or validate one.
    ExportFinetune {
        #[arg(long, required_unless_present = "validate")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 36)]
        seed: u64,
        /// Comma-separated formats; defaults to the manifest's.
        #[arg(long, value_delimiter = ',')]
        formats: Vec<PromptFormat>,
        #[arg(long, required_unless_present = "validate")]
        out: Option<PathBuf>,
        /// Validate an existing JSONL file and exit.
        #[arg(long, conflicts_with_all = ["manifest", "out"])]
        validate: Option<PathBuf>,
    },
    /// Run every seed of a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// k x p ablation grid.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        ps: Vec<usize>,
        /// Defaults to 36,73,314.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// MCAR rate sweep, or the natural-missingness protocol when no rates are given.
    Missingness {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        /// Mask only the test targets.
        #[arg(long)]
        targets_only: bool,
    },
    /// Flat metrics CSV and markdown summary for one or more run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic cohort and its schema.
    Synth {
        #[arg(long, value_enum, default_value = "imaging")]
        kind: SynthKind,
        #[arg(long, default_value_t = 333)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        positives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Blank up to this share of each row's cells.
        #[arg(long)]
        missing: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SynthKind {
    Imaging,
    Biomarker,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| path.display().to_string())?))
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}

fn print_json(v: &serde_json::Value) -> io::Result<()> {
    emit(&(serde_json::to_string_pretty(v).expect("json value") + "\n"))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { input, out } => {
            let t = input.load()?;
            if let Some(out) = out {
                let mut w = create(&out)?;
                write_table(&t, &mut w)?;
                w.flush()?;
            }
            let pos = t.rows().iter().filter(|r| t.label(r) == Some(1)).count();
            print_json(&json!({
                "rows": t.len(),
                "positives": pos,
                "complete": filter_complete(&t).len(),
                "incomplete": filter_incomplete(&t).len(),
                "covariates": t.covariate_names(),
                "features": t.feature_names().len(),
            }))?;
        }
        Command::Split {
            input,
            seed,
            no_stratify,
            out,
        } => {
            let cohort = filter_complete(&input.load()?);
            let s = make_splits(&cohort, SplitFractions::default(), seed, !no_stratify)?;
            s.verify(&cohort)?;
            let mut w = create(&out)?;
            writeln!(w, "{}", s.to_json())?;
            w.flush()?;
            let sizes: serde_json::Map<_, _> = Partition::ALL
                .iter()
                .map(|p| (p.name().to_string(), json!(s.ids(*p).len())))
                .collect();
            print_json(&serde_json::Value::Object(sizes))?;
        }
        Command::SelectFeatures {
            input,
            split,
            p,
            external,
            out,
        } => {
            let cohort = filter_complete(&input.load()?);
            let s = SplitAssignment::from_json(&fs::read_to_string(&split)?)?;
            s.verify(&cohort)?;
            let ranking = match external {
                Some(path) => import_external_ranking(fs::File::open(&path)?, &cohort)?,
                None => lasso_path_rank(&cohort.subset(s.ids(Partition::Train))?)?,
            };
            let fs_ = select_top_p(&ranking, p, &cohort.covariate_names())?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ranking.csv"), ranking.to_csv())?;
            fs::write(out.join("features.json"), fs_.to_json() + "\n")?;
            print_json(&json!({ "selected": fs_.selected }))?;
        }
        Command::GenPrompts {
            manifest,
            seed,
            format,
            out,
        } => {
            let m = ExperimentManifest::load(&manifest)?;
            let format = format.unwrap_or(m.format);
            let mut check = m.clone();
            check.format = format;
            check.reflection = false;
            if format.shots == tabicl::prompt::Shots::Zero {
                check.k = None;
            } else if check.k.is_none() {
                bail!("few-shot prompts need k in the manifest");
            }
            check.validate()?;
            let ws = Workspace::load(&check)?;
            let plan = plan_seed(&check, &ws, seed, Partition::Test)?;
            let prompts = render_prompts(&check, &ws, &plan, format)?;
            let mut w = create(&out)?;
            for p in &prompts {
                serde_json::to_writer(&mut w, p)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            eprintln!("{} prompts", prompts.len());
        }
        Command::ExportFinetune {
            manifest,
            seed,
            formats,
            out,
            validate,
        } => {
            if let Some(path) = validate {
                let report = validate_jsonl(BufReader::new(fs::File::open(&path)?));
                print_json(&serde_json::to_value(&report)?)?;
                if !report.passed() {
                    bail!("{} failed validation", path.display());
                }
                return Ok(());
            }
            let (manifest, out) = (manifest.expect("clap requires it"), out.expect("clap requires it"));
            let mut m = ExperimentManifest::load(&manifest)?;
            m.reflection = false;
            m.validate()?;
            let formats = if formats.is_empty() { vec![m.format] } else { formats };
            let ws = Workspace::load(&m)?;
            let records = finetune_records(&m, &ws, seed, &formats)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let n = write_finetune_jsonl(records, &out)?;
            let sidecar = ExportManifest {
                dataset: m.dataset.name.clone(),
                dataset_sha256: ws.dataset_sha256.clone(),
                seed,
                formats,
                instruction_version: ws.instructions.version.clone(),
                template_version: ws.template.as_ref().map(|t| t.version.clone()),
                records: n,
                jsonl_sha256: sha256_hex(&fs::read(&out)?),
            };
            let sidecar_path = out.with_extension("manifest.json");
            fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
            eprintln!("{n} records, sidecar {}", sidecar_path.display());
        }
        Command::Run { manifest } => {
            let m = ExperimentManifest::load(&manifest)?;
            let rs = run_experiment(&m)?;
            for f in &rs.failures {
                eprintln!("seed {} failed: {}", f.seed, f.error);
            }
            print_json(&json!({
                "manifest_hash": rs.manifest_hash,
                "output_dir": rs.output_dir,
                "seeds": rs.seeds.len(),
                "failures": rs.failures.len(),
                "summary": rs.summary,
            }))?;
        }
        Command::Ablate {
            manifest,
            ks,
            ps,
            seeds,
        } => {
            let m = ExperimentManifest::load(&manifest)?;
            let seeds = if seeds.is_empty() { ABLATION_SEEDS.to_vec() } else { seeds };
            let g = run_ablation_grid(&m, &ks, &ps, &seeds)?;
            for f in &g.failures {
                eprintln!("k={} p={:?} seed={:?} failed: {}", f.k, f.p, f.seed, f.error);
            }
            emit(&g.csv)?;
        }
        Command::Missingness {
            manifest,
            rates,
            targets_only,
        } => {
            let base = ExperimentManifest::load(&manifest)?;
            if rates.is_empty() {
                if !matches!(base.missingness, Missingness::Natural { .. }) {
                    bail!("give --rates or a manifest with natural missingness");
                }
                let rs = run_experiment(&base)?;
                print_json(&json!({ "output_dir": rs.output_dir, "summary": rs.summary }))?;
                return Ok(());
            }
            let mut out = Vec::new();
            for rate in rates {
                let mut m = base.clone();
                m.missingness = Missingness::Mcar { rate, targets_only };
                m.output_dir = base.output_dir.join(format!("mcar-{rate}"));
                match run_experiment(&m) {
                    Ok(rs) => out.push(json!({ "rate": rate, "output_dir": rs.output_dir, "summary": rs.summary })),
                    Err(e) => out.push(json!({ "rate": rate, "error": e.to_string() })),
                }
            }
            print_json(&serde_json::Value::Array(out))?;
        }
        Command::Report { runs, out } => {
            let loaded = write_report(&runs, &out)?;
            eprintln!("{} runs -> {}", loaded.len(), out.display());
            emit(&fs::read_to_string(out.join("summary.md"))?)?;
        }
        Command::Synth {
            kind,
            n,
            positives,
            seed,
            missing,
            out,
        } => {
            if positives > n {
                bail!("positives exceed n");
            }
            let mut t = match kind {
                SynthKind::Imaging => synth::imaging_cohort(n, positives, seed),
                SynthKind::Biomarker => synth::biomarker_cohort(n, positives, seed),
            };
            if let Some(f) = missing {
                t = synth::with_natural_missingness(&t, f, seed);
            }
            fs::create_dir_all(&out)?;
            let mut w = create(&out.join("cohort.csv"))?;
            write_table(&t, &mut w)?;
            w.flush()?;
            fs::write(out.join("schema.json"), t.schema().to_json() + "\n")?;
        }
    }
    Ok(())
}
