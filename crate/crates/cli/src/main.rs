use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use abn_core::data::{generate, load_dataset, oracle_map, save_dataset, Dataset, Split};
use abn_core::metrics::{evaluate_model, write_curve_csv, DEFAULT_STEPS};
use abn_core::train::{
    accuracy, calibrate_gamma, collect_misclassified, finetune_with_maps, train_abn, write_history_csv,
    LossBreakdown,
};
use abn_core::{build_model, checkpoint, AbnModel, AttentionMap};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod config;

use config::{Gamma, Settings};

#[derive(Parser)]
#[command(name = "abn", version, about = "Attention branch network with editable attention maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Settings file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the settings file.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn settings(&self) -> Result<(Settings, u64)> {
        let s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let seed = self.seed.or(s.seed).unwrap_or(0);
        Ok((s, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test split as PGM images plus manifests.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh model (or continue from `--model`) on `L_att + L_per`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest.
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; a new model is initialized when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Save the attention maps of misclassified samples.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write oracle edited maps to `<out>/edited`.
        #[arg(long)]
        oracle: bool,
    },
    /// Fine-tune with edited maps on `L_abn + L_map`.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<sample_id>.amap` edited maps.
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Deletion/insertion AUCs and map MSE, one CSV row per sample.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<sample_id>.amap` reference maps for the MSE column.
        #[arg(long, conflicts_with = "oracle")]
        reference: Option<PathBuf>,
        /// Use oracle maps as the MSE reference.
        #[arg(long)]
        oracle: bool,
        /// Directory for per-sample `fraction,score` curve CSVs.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Pixel fill: mean, zero or gray.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the editor HTTP service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Session store directory; `ABN_STORE` takes precedence.
        #[arg(long, default_value = "abn-store")]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Display resolution as a multiple of the map resolution.
        #[arg(long, default_value_t = abn_service::DEFAULT_DISPLAY_SCALE)]
        display_scale: usize,
    },
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<AbnModel> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_history(path: Option<&Path>, history: &[LossBreakdown]) -> Result<()> {
    if let Some(p) = path {
        let mut out = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        write_history_csv(history, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn read_maps(dir: &Path) -> Result<HashMap<String, AttentionMap>> {
    let mut maps = HashMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "amap") {
            let id = path.file_stem().and_then(|s| s.to_str()).context("map file name")?.to_string();
            maps.insert(id, AttentionMap::load(&path)?);
        }
    }
    Ok(maps)
}

fn cmd_generate(common: &Common, out: &Path) -> Result<()> {
    let (s, seed) = common.settings()?;
    let n = s.samples.unwrap_or(1000);
    let n_train = s.train_samples.unwrap_or(n * 4 / 5);
    if n_train == 0 || n_train >= n {
        bail!("train_samples must be between 1 and samples - 1");
    }
    let dataset = generate(n, s.num_classes.unwrap_or(4), seed, s.distractor_rate.unwrap_or(0.5))?;
    let (train, test) = dataset.split_at(n_train);
    let a = save_dataset(&train, out, Split::Train, seed)?;
    let b = save_dataset(&test, out, Split::Test, seed)?;
    println!("wrote {} ({} samples) and {} ({} samples)", a.display(), train.len(), b.display(), test.len());
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, init: Option<&Path>, out: &Path, history: Option<&Path>) -> Result<()> {
    let (s, seed) = common.settings()?;
    let dataset = load_data(data)?;
    let first = &dataset.samples.first().context("empty dataset")?.image;
    let mut model = match init {
        Some(p) => load_model(p)?,
        None => build_model(
            s.model_config(dataset.num_classes, (first.height(), first.width()), first.channels()),
            seed,
        )?,
    };
    let hist = train_abn(&mut model, &dataset, &s.train_config(seed))?;
    save_history(history, &hist)?;
    checkpoint::save(&model, out)?;
    let last = hist.last().copied().unwrap_or_default();
    println!(
        "{} steps, final L_abn {:.4}, train accuracy {:.3}, saved {}",
        hist.len(),
        last.l_abn,
        accuracy(&model, &dataset)?,
        out.display()
    );
    Ok(())
}

fn cmd_collect(model: &Path, data: &Path, out: &Path, oracle: bool) -> Result<()> {
    let model = load_model(model)?;
    let dataset = load_data(data)?;
    let missed = collect_misclassified(&model, &dataset)?;
    std::fs::create_dir_all(out.join("maps"))?;
    let mut index = BufWriter::new(File::create(out.join("misclassified.tsv"))?);
    writeln!(index, "sample_id\tpredicted\tlabel")?;
    let (mh, mw) = model.config().map_size;
    if oracle {
        std::fs::create_dir_all(out.join("edited"))?;
    }
    for m in &missed {
        writeln!(index, "{}\t{}\t{}", m.sample_id, m.predicted, m.label)?;
        m.attention_map.save(out.join("maps").join(format!("{}.amap", m.sample_id)))?;
        if oracle {
            let edited = oracle_map(&dataset.samples[m.index], mh, mw)?;
            edited.save(out.join("edited").join(format!("{}.amap", m.sample_id)))?;
        }
    }
    index.flush()?;
    println!("{} of {} samples misclassified; maps in {}", missed.len(), dataset.len(), out.display());
    Ok(())
}

fn cmd_finetune(common: &Common, model: &Path, data: &Path, edits: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let (s, seed) = common.settings()?;
    let mut model = load_model(model)?;
    let dataset = load_data(data)?;
    let edited = read_maps(edits)?;
    if edited.is_empty() {
        bail!("no .amap files in {}", edits.display());
    }
    let gamma = match s.gamma.unwrap_or(Gamma::Fixed(abn_core::train::DEFAULT_GAMMA)) {
        Gamma::Fixed(g) => g,
        Gamma::Auto => calibrate_gamma(&model, &dataset, &edited)?,
    };
    let hist = finetune_with_maps(&mut model, &dataset, &edited, &s.finetune_config(seed, gamma))?;
    save_history(history, &hist)?;
    checkpoint::save(&model, out)?;
    println!(
        "fine-tuned on {} edited maps (gamma {gamma:.4}), {} steps, train accuracy {:.3}, saved {}",
        edited.len(),
        hist.len(),
        accuracy(&model, &dataset)?,
        out.display()
    );
    Ok(())
}

struct EvalArgs<'a> {
    model: &'a Path,
    data: &'a Path,
    out: &'a Path,
    reference: Option<&'a Path>,
    oracle: bool,
    curves: Option<&'a Path>,
    baseline: Option<&'a str>,
    steps: Option<usize>,
}

fn cmd_eval(common: &Common, a: EvalArgs<'_>) -> Result<()> {
    let (s, _) = common.settings()?;
    let model = load_model(a.model)?;
    let dataset = load_data(a.data)?;
    let baseline = match a.baseline {
        Some(b) => b.parse()?,
        None => s.baseline.unwrap_or_default(),
    };
    let steps = a.steps.or(s.steps).unwrap_or(DEFAULT_STEPS);
    let reference = if a.oracle {
        let (mh, mw) = model.config().map_size;
        let maps = dataset
            .samples
            .iter()
            .map(|smp| Ok((smp.id.clone(), oracle_map(smp, mh, mw)?)))
            .collect::<abn_core::Result<HashMap<_, _>>>()?;
        Some(maps)
    } else {
        a.reference.map(read_maps).transpose()?
    };
    let report = evaluate_model(&model, &dataset, reference.as_ref(), steps, baseline)?;
    let mut out = BufWriter::new(File::create(a.out).with_context(|| format!("creating {}", a.out.display()))?);
    report.write_csv(&mut out)?;
    out.flush()?;
    if let Some(dir) = a.curves {
        std::fs::create_dir_all(dir)?;
        for (id, (del, ins)) in &report.curves {
            write_curve_csv(del, File::create(dir.join(format!("{id}.deletion.csv")))?)?;
            write_curve_csv(ins, File::create(dir.join(format!("{id}.insertion.csv")))?)?;
        }
    }
    let mse = report.map_mse.map_or("n/a".to_string(), |m| format!("{m:.5}"));
    println!(
        "accuracy {:.3}  deletion {:.4} (lower is better)  insertion {:.4} (higher is better)  map mse {mse}",
        accuracy(&model, &dataset)?,
        report.deletion_auc,
        report.insertion_auc
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { common, out } => cmd_generate(common, out),
        Command::Train {
            common,
            data,
            model,
            out,
            history,
        } => cmd_train(common, data, model.as_deref(), out, history.as_deref()),
        Command::Collect {
            common: _,
            model,
            data,
            out,
            oracle,
        } => cmd_collect(model, data, out, *oracle),
        Command::Finetune {
            common,
            model,
            data,
            edits,
            out,
            history,
        } => cmd_finetune(common, model, data, edits, out, history.as_deref()),
        Command::Eval {
            common,
            model,
            data,
            out,
            reference,
            oracle,
            curves,
            baseline,
            steps,
        } => cmd_eval(
            common,
            EvalArgs {
                model,
                data,
                out,
                reference: reference.as_deref(),
                oracle: *oracle,
                curves: curves.as_deref(),
                baseline: baseline.as_deref(),
                steps: *steps,
            },
        ),
        Command::Serve {
            model,
            data,
            store,
            host,
            port,
            display_scale,
        } => {
            let opts = abn_service::ServeOptions {
                checkpoint: model.clone(),
                dataset: data.clone(),
                store: abn_service::resolve_store(store),
                host: host.clone(),
                port: *port,
                display_scale: *display_scale,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(abn_service::serve(opts)).map_err(anyhow::Error::msg)
        }
    }
}
