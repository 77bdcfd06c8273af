//! The `moefusion` command line: tokenizer and LM training, shallow-fusion
//! decoding, evaluation and reporting.

pub mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use moefusion::eval::{aggregate, emit_report, read_transcripts, score_transcripts, ReportFormat};
use moefusion::fusion::FusionConfig;
use moefusion::model::{count_params_flops, Dispatch};
use moefusion::synth::{self, LatticeParams, SynthConfig, SynthWorld};
use moefusion::tokenizer::{load_corpora, train_wordpiece};
use moefusion::train::{train, AdafactorHyper, LrSchedule, TrainOptions};
use moefusion::{Checkpoint, MoeLmConfig, TokenSeq, Vocab};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "moefusion",
    version,
    about = "Sparse MoE language models for shallow-fusion decoding"
)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a pooled subword vocabulary from a corpus manifest.
    TrainTokenizer(TrainTokenizerArgs),
    /// Train an LM on the sentences of a corpus manifest.
    TrainLm(TrainLmArgs),
    /// Beam-search a lattice set, optionally fused with an LM.
    Decode(DecodeArgs),
    /// Score hypotheses against references and write per-language reports.
    Evaluate(EvaluateArgs),
    /// Print parameter and per-token compute counts of a configuration.
    Flops(FlopsArgs),
    /// Decode and score a lattice set at several fusion weights.
    SweepLambda(SweepArgs),
    /// Generate synthetic corpora, references and lattices.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// TSV of `locale<TAB>path` lines.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 16384)]
    pub vocab_size: usize,
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub ffn_multiplier: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub experts_per_token: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub moe_stride: Option<usize>,
    #[arg(long)]
    pub aux_weight: Option<f64>,
    /// Use a separate output projection instead of the embedding.
    #[arg(long)]
    #[serde(default)]
    pub untied: bool,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut MoeLmConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.num_layers, self.layers);
        set(&mut cfg.model_dim, self.dim);
        set(&mut cfg.num_heads, self.heads);
        set(&mut cfg.head_dim, self.head_dim);
        set(&mut cfg.ffn_multiplier, self.ffn_multiplier);
        set(&mut cfg.num_experts, self.experts);
        set(&mut cfg.experts_per_token, self.experts_per_token);
        set(&mut cfg.max_seq_len, self.max_seq_len);
        set(&mut cfg.moe_layer_stride, self.moe_stride);
        if let Some(w) = self.aux_weight {
            cfg.aux_loss_weight = w;
        }
        if self.untied {
            cfg.tied_embeddings = false;
        }
    }

    fn merge(self, file: ModelFlags) -> ModelFlags {
        ModelFlags {
            layers: self.layers.or(file.layers),
            dim: self.dim.or(file.dim),
            heads: self.heads.or(file.heads),
            head_dim: self.head_dim.or(file.head_dim),
            ffn_multiplier: self.ffn_multiplier.or(file.ffn_multiplier),
            experts: self.experts.or(file.experts),
            experts_per_token: self.experts_per_token.or(file.experts_per_token),
            max_seq_len: self.max_seq_len.or(file.max_seq_len),
            moe_stride: self.moe_stride.or(file.moe_stride),
            aux_weight: self.aux_weight.or(file.aux_weight),
            untied: self.untied || file.untied,
        }
    }
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub packing_factor: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warmup steps of the inverse square-root schedule; 0 keeps `lr` fixed.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Stop when the loss over this many steps stops improving; 0 disables.
    #[arg(long)]
    pub plateau_window: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Run every expert on every token, weighted by the full gate softmax.
    #[arg(long)]
    #[serde(default)]
    pub dense_mixture: bool,
}

impl TrainFlags {
    fn merge(self, file: TrainFlags) -> TrainFlags {
        TrainFlags {
            steps: self.steps.or(file.steps),
            batch_size: self.batch_size.or(file.batch_size),
            packing_factor: self.packing_factor.or(file.packing_factor),
            lr: self.lr.or(file.lr),
            warmup: self.warmup.or(file.warmup),
            plateau_window: self.plateau_window.or(file.plateau_window),
            checkpoint_every: self.checkpoint_every.or(file.checkpoint_every),
            dense_mixture: self.dense_mixture || file.dense_mixture,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigFile {
    #[serde(default)]
    model: ModelFlags,
    #[serde(default)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// TOML file with `[model]` and `[train]` tables; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct BeamFlags {
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub n_best: usize,
    /// Rank finished hypotheses by score per token.
    #[arg(long)]
    pub length_norm: bool,
}

impl BeamFlags {
    fn config(&self, lambda: f64) -> FusionConfig {
        FusionConfig {
            lambda,
            beam_size: self.beam,
            max_len: self.max_len,
            n_best: self.n_best,
            length_normalization: self.length_norm,
        }
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Directory holding `index.tsv` and the lattice files.
    #[arg(long)]
    pub lattices: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// LM checkpoint directory; without it decoding uses the lattice alone.
    #[arg(long, requires = "lambda")]
    pub lm: Option<PathBuf>,
    /// LM weight in the fused score.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub beam: BeamFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// TSV of `utt_id<TAB>locale<TAB>text` references.
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub hyps: PathBuf,
    /// Hypotheses of a baseline system to compute relative reductions.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    pub baseline_name: String,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub ffn_multiplier: usize,
    #[arg(long, default_value_t = 64)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub experts_per_token: usize,
    #[arg(long, default_value_t = 16384)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1024)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 2)]
    pub moe_stride: usize,
    #[arg(long)]
    pub untied: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub lattices: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    /// Comma-separated fusion weights.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub beam: BeamFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Text corpora, manifest, references and confusion pairs.
    Corpus,
    /// Lattices for the references, using a trained vocabulary.
    Lattices,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long, default_value_t = 3)]
    pub locales: usize,
    #[arg(long, default_value_t = 8)]
    pub entities: usize,
    #[arg(long, default_value_t = 400)]
    pub train_sentences: usize,
    #[arg(long, default_value_t = 20)]
    pub test_utterances: usize,
    /// Vocabulary for the lattice stage.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// References for the lattice stage (default: `<output-dir>/refs.tsv`).
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Confusion pairs (default: `<output-dir>/confusions.tsv`).
    #[arg(long)]
    pub confusions: Option<PathBuf>,
    /// Recognizer logit of the homophone relative to the reference token.
    #[arg(long, default_value_t = 0.4)]
    pub confusion_margin: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
}

/// Parses `argv` and runs the subcommand. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = check_inputs(&cli.command) {
        eprintln!("error: {e:#}");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn check_inputs(command: &Command) -> Result<()> {
    let paths: Vec<&Path> = match command {
        Command::TrainTokenizer(a) => vec![&a.manifest],
        Command::TrainLm(a) => {
            let mut v: Vec<&Path> = vec![&a.manifest, &a.vocab];
            v.extend(a.config.as_deref());
            v
        }
        Command::Decode(a) => {
            let mut v: Vec<&Path> = vec![&a.lattices, &a.vocab];
            v.extend(a.lm.as_deref());
            v
        }
        Command::Evaluate(a) => {
            let mut v: Vec<&Path> = vec![&a.refs, &a.hyps];
            v.extend(a.baseline.as_deref());
            v
        }
        Command::SweepLambda(a) => vec![&a.lattices, &a.vocab, &a.lm, &a.refs],
        Command::GenSynthetic(a) => a.vocab.as_deref().into_iter().collect(),
        Command::Flops(_) => vec![],
    };
    for p in paths {
        if !p.exists() {
            bail!("input path {} does not exist", p.display());
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let out = &cli.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::TrainTokenizer(a) => {
            let corpora = load_corpora(&a.manifest)?;
            let vocab = train_wordpiece(&corpora, a.vocab_size)?;
            let path = out.join("vocab.txt");
            vocab.save(&path)?;
            println!("vocabulary of {} pieces written to {}", vocab.len(), path.display());
        }
        Command::TrainLm(a) => train_lm(a, cli.seed, out)?,
        Command::Decode(a) => {
            let vocab = Vocab::load(&a.vocab)?;
            let utts = pipeline::load_lattice_dir(&a.lattices)?;
            let lm = a.lm.as_deref().map(Checkpoint::load).transpose()?;
            let lambda = a.lambda.unwrap_or(0.0);
            let cfg = a.beam.config(lambda);
            let decoded = pipeline::decode_all(&utts, &vocab, lm.as_ref().map(|c| &c.model), &cfg)?;
            pipeline::write_decodes(out, &decoded)?;
            println!(
                "decoded {} utterances into {}",
                decoded.len(),
                out.join("decodes.tsv").display()
            );
        }
        Command::Evaluate(a) => {
            let refs = read_transcripts(&a.refs)?;
            let system = score_transcripts(&refs, &read_transcripts(&a.hyps)?)?;
            let baseline = a
                .baseline
                .as_deref()
                .map(|b| score_transcripts(&refs, &read_transcripts(b)?))
                .transpose()?;
            let report = aggregate(&system, baseline.as_deref().map(|b| (a.baseline_name.as_str(), b)), &[]);
            emit_report(&report, &out.join("report.csv"), ReportFormat::Csv)?;
            emit_report(&report, &out.join("report.json"), ReportFormat::Json)?;
            println!(
                "{} languages: macro WER {:.2}%, micro WER {:.2}%",
                report.languages.len(),
                100.0 * report.macro_wer,
                100.0 * report.micro_wer
            );
            if let Some(base) = report.baseline_macro_wer {
                println!(
                    "baseline macro WER {:.2}%; improved {}, tied {}, regressed {}",
                    100.0 * base,
                    report.improved,
                    report.tied,
                    report.regressed
                );
            }
        }
        Command::Flops(a) => flops(a)?,
        Command::SweepLambda(a) => {
            let vocab = Vocab::load(&a.vocab)?;
            let utts = pipeline::load_lattice_dir(&a.lattices)?;
            let lm = Checkpoint::load(&a.lm)?;
            let refs = read_transcripts(&a.refs)?;
            let rows = pipeline::sweep_lambda(&utts, &refs, &vocab, &lm.model, &a.values, &a.beam.config(0.0))?;
            let csv = pipeline::sweep_csv(&rows);
            fs::write(out.join("sweep.csv"), &csv).context("writing sweep.csv")?;
            print!("{csv}");
        }
        Command::GenSynthetic(a) => gen_synthetic(a, cli.seed, out)?,
    }
    Ok(())
}

fn train_lm(a: &TrainLmArgs, seed: u64, out: &Path) -> Result<()> {
    let file: TrainConfigFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfigFile::default(),
    };
    let model_flags = a.model.clone().merge(file.model);
    let train_flags = a.train.clone().merge(file.train);

    let vocab = Vocab::load(&a.vocab)?;
    let mut config = MoeLmConfig::tiny(vocab.len());
    model_flags.apply(&mut config);
    config.validate()?;

    let sentences: Vec<TokenSeq> = load_corpora(&a.manifest)?
        .iter()
        .flat_map(|c| {
            c.sentences.iter().map(|s| {
                let mut seq = vocab.encode(s);
                seq.language_tag = Some(c.locale.clone());
                seq
            })
        })
        .collect();
    let defaults = TrainOptions::default();
    let lr = train_flags.lr.unwrap_or(0.01);
    let warmup = train_flags.warmup.unwrap_or(0);
    let opts = TrainOptions {
        steps: train_flags.steps.unwrap_or(300),
        batch_size: train_flags.batch_size.unwrap_or(defaults.batch_size),
        packing_factor: train_flags.packing_factor.unwrap_or(defaults.packing_factor),
        seed,
        optimizer: AdafactorHyper {
            learning_rate: if warmup == 0 {
                LrSchedule::Constant(lr)
            } else {
                LrSchedule::InverseSqrt { peak: lr, warmup }
            },
            ..Default::default()
        },
        dispatch: if train_flags.dense_mixture {
            Dispatch::DenseMixture
        } else {
            Dispatch::Sparse
        },
        plateau_window: match train_flags.plateau_window {
            Some(0) => None,
            Some(w) => Some(w),
            None => defaults.plateau_window,
        },
        checkpoint_every: train_flags.checkpoint_every,
        checkpoint_dir: train_flags.checkpoint_every.map(|_| out.join("checkpoints")),
    };
    let (checkpoint, log) = train(&sentences, config, &opts)?;
    checkpoint.save(&out.join("checkpoint"))?;
    fs::write(out.join("train_log.csv"), log.to_csv()).context("writing train_log.csv")?;
    fs::write(out.join("routing.csv"), log.routing_csv()).context("writing routing.csv")?;
    let first = log.records.first().map_or(f64::NAN, |r| r.loss);
    let last = log.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps: loss {first:.4} -> {last:.4}{}",
        checkpoint.training_step,
        if log.stopped_on_plateau { " (plateau)" } else { "" }
    );
    if log.truncated_sentences > 0 {
        println!("{} sentences were truncated", log.truncated_sentences);
    }
    Ok(())
}

fn flops(a: &FlopsArgs) -> Result<()> {
    let config = MoeLmConfig {
        num_layers: a.layers,
        model_dim: a.dim,
        num_heads: a.heads,
        head_dim: a.head_dim,
        ffn_multiplier: a.ffn_multiplier,
        num_experts: a.experts,
        experts_per_token: a.experts_per_token,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
        moe_layer_stride: a.moe_stride,
        tied_embeddings: !a.untied,
        ..MoeLmConfig::base_64e()
    };
    config.validate()?;
    let r = count_params_flops(&config);
    let f = &r.flops_per_token;
    println!(
        "total_params              {:>16}  ({})",
        r.total_params,
        human(r.total_params)
    );
    println!(
        "active_params_per_token   {:>16}  ({})",
        r.active_params_per_token,
        human(r.active_params_per_token)
    );
    println!("flops_per_token           {:>16}  ({})", f.total(), human(f.total()));
    println!("  attention               {:>16}", f.attention);
    println!("  dense_ffn               {:>16}", f.dense_ffn);
    println!("  moe_expert              {:>16}", f.moe_expert);
    println!("  gating                  {:>16}", f.gating);
    println!("  embedding_softmax       {:>16}", f.embedding_softmax);
    Ok(())
}

fn human(n: u64) -> String {
    let n = n as f64;
    if n >= 1e9 {
        format!("{:.2}B", n / 1e9)
    } else if n >= 1e6 {
        format!("{:.1}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

fn gen_synthetic(a: &GenSyntheticArgs, seed: u64, out: &Path) -> Result<()> {
    match a.stage {
        Stage::Corpus => {
            let cfg = SynthConfig {
                locales: a.locales,
                entities: a.entities,
                train_sentences: a.train_sentences,
                test_utterances: a.test_utterances,
                seed,
                ..Default::default()
            };
            let world = SynthWorld::generate(&cfg)?;
            synth::write_corpus_stage(&world, &cfg, out)?;
            println!(
                "wrote {} locales to {} (manifest.tsv, refs.tsv, confusions.tsv)",
                world.languages.len(),
                out.display()
            );
        }
        Stage::Lattices => {
            let Some(vocab_path) = &a.vocab else {
                bail!("--stage lattices needs --vocab");
            };
            let vocab = Vocab::load(vocab_path)?;
            let refs_path = a.refs.clone().unwrap_or_else(|| out.join("refs.tsv"));
            let conf_path = a.confusions.clone().unwrap_or_else(|| out.join("confusions.tsv"));
            let refs = read_transcripts(&refs_path)?;
            let confusions = synth::read_confusions(&conf_path)?;
            let defaults = LatticeParams::default();
            let params = LatticeParams {
                confusion_logit: defaults.target_logit + a.confusion_margin,
                noise: a.noise,
                ..defaults
            };
            let dir = out.join("lattices");
            let entries = synth::write_lattice_stage(&refs, &vocab, &confusions, &params, seed, &dir)?;
            println!("wrote {} lattices to {}", entries.len(), dir.display());
        }
    }
    Ok(())
}
