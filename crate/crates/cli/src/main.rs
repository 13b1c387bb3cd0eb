use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use jointie::checkpoint;
use jointie::config::Config;
use jointie::corpus::{generate_corpus, GrammarSpec};
use jointie::evaluation::{load_dataset, write_dataset, AnnotatedExample};
use jointie::model::{build_vocab, ExtractOptions, JointModel, Schema};
use jointie::text::{tokenize, ExtractionResult};
use jointie::training::{run_training, write_trace, Control};

#[derive(Parser)]
#[command(name = "jointie", version, about = "Joint entity and relation extraction with label prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotated corpus as JSON lines.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a loss trace.
    Train(TrainArgs),
    /// Extract entities and relations from raw text.
    Extract(ExtractArgs),
    /// Score a checkpoint on an annotated dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Grammar file; the built-in grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Number of examples.
    #[arg(long, default_value_t = 100)]
    size: usize,
    /// Overrides the grammar's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Toy encoder sized for a laptop.
    Desk,
    /// Default configuration with the large pretrained backbone.
    Large,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; takes precedence over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Training data (JSON lines); used by every enabled stage unless --stage1-data is given.
    /// Without it, both stages train on corpora drawn from the built-in grammar.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Separate stage-1 data; stage 2 then uses --data.
    #[arg(long)]
    stage1_data: Option<PathBuf>,
    /// Synthetic stage-1 corpus size when no data files are given.
    #[arg(long, default_value_t = 2000)]
    stage1_size: usize,
    /// Synthetic stage-2 corpus size when no data files are given.
    #[arg(long, default_value_t = 200)]
    stage2_size: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a `.trace.csv` suffix.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate config and data, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text to process; repeatable.
    #[arg(long = "text")]
    texts: Vec<String>,
    /// File with one text per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Entity type to look for; repeatable.
    #[arg(long = "entity-label")]
    entity_labels: Vec<String>,
    /// File with one entity label per line.
    #[arg(long)]
    entity_labels_file: Option<PathBuf>,
    /// Relation type to look for; repeatable.
    #[arg(long = "relation-label")]
    relation_labels: Vec<String>,
    /// File with one relation label per line.
    #[arg(long)]
    relation_labels_file: Option<PathBuf>,
    /// Entity score threshold.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    /// Relation score threshold.
    #[arg(long, default_value_t = 0.5)]
    relation_threshold: f64,
    /// Disallow overlapping entities.
    #[arg(long)]
    flat_ner: bool,
    /// Human-readable tables instead of JSON lines.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotated dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Entity threshold; the checkpoint's configured value when omitted.
    #[arg(long)]
    threshold: Option<f64>,
    /// Relation threshold; the checkpoint's configured value when omitted.
    #[arg(long)]
    relation_threshold: Option<f64>,
    /// Disallow overlapping entities.
    #[arg(long)]
    flat_ner: bool,
    /// Require relation endpoints to carry the gold entity types.
    #[arg(long)]
    check_entity_types: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.downcast_ref::<jointie::Error>().is_some_and(|j| !j.is_user_error());
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn print_header(title: &str, body: &str) {
    eprintln!("# {title}");
    eprint!("{body}");
    if !body.ends_with('\n') {
        eprintln!();
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut grammar = match &a.grammar {
        Some(p) => GrammarSpec::load(p).with_context(|| format!("loading grammar {}", p.display()))?,
        None => GrammarSpec::default_grammar(),
    };
    if let Some(seed) = a.seed {
        grammar.seed = seed;
    }
    let source = a.grammar.as_ref().map_or("built-in".to_string(), |p| p.display().to_string());
    print_header(
        "resolved configuration",
        &format!("grammar = {source:?}\nsize = {}\nseed = {}\nout = {:?}\n", a.size, grammar.seed, a.out.display().to_string()),
    );
    let corpus = generate_corpus(&grammar, a.size)?;
    write_dataset(&a.out, &corpus)?;
    let entities: usize = corpus.iter().map(|e| e.gold_entities.len()).sum();
    let relations: usize = corpus.iter().map(|e| e.gold_relations.len()).sum();
    println!("examples={} entities={} relations={}", corpus.len(), entities, relations);
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<Vec<AnnotatedExample>> {
    let data = load_dataset(path)?;
    if data.is_empty() {
        bail!("{} contains no examples", path.display());
    }
    Ok(data)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => match a.preset {
            Preset::Desk => Config::desk(),
            Preset::Large => Config::default(),
        },
    };
    if let Some(seed) = a.seed {
        config.training.seed = seed;
    }
    config.validate()?;
    print_header("resolved configuration", &config.to_toml()?);

    let (stage1, data) = match (&a.stage1_data, &a.data) {
        (Some(s1), Some(s2)) => (load_data(s1)?, load_data(s2)?),
        (None, Some(s2)) => {
            let d = load_data(s2)?;
            (d.clone(), d)
        }
        (Some(_), None) => bail!("--stage1-data needs --data for stage 2"),
        (None, None) => {
            let mut grammar = GrammarSpec::default_grammar();
            let s1 = generate_corpus(&grammar, a.stage1_size)?;
            grammar.seed = grammar.seed.wrapping_add(1);
            (s1, generate_corpus(&grammar, a.stage2_size)?)
        }
    };
    let all: Vec<AnnotatedExample> = stage1.iter().chain(&data).cloned().collect();
    let schema = Schema::from_examples(&all);
    let vocab = build_vocab(&all, &schema, &config);
    let mut model = JointModel::new(config, vocab, schema)?;
    eprintln!(
        "# data: {} examples, {} entity labels, {} relation labels, {} parameters",
        data.len(),
        model.schema.entity_labels.len(),
        model.schema.relation_labels.len(),
        model.store.scalar_count()
    );
    if a.dry_run {
        println!("dry run: configuration and data are valid");
        return Ok(());
    }

    let mut hook = |stage: usize, epoch: usize, _: &JointModel| -> jointie::Result<Control> {
        eprintln!("stage {stage} epoch {} done", epoch + 1);
        Ok(Control::Continue)
    };
    let trace = run_training(&mut model, &stage1, &data, &mut hook)?;
    let final_loss = model.mean_loss(&data)?;
    checkpoint::save(&model, &a.out, Some(final_loss))?;
    let trace_path = a.trace.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    write_trace(&trace_path, &trace)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.out,
            "trace": trace_path,
            "steps": trace.len(),
            "final_train_loss": final_loss,
        })
    );
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn extract(a: ExtractArgs) -> anyhow::Result<()> {
    let mut texts = a.texts.clone();
    if let Some(p) = &a.input {
        texts.extend(read_lines(p)?);
    }
    let mut entity_labels = a.entity_labels.clone();
    if let Some(p) = &a.entity_labels_file {
        entity_labels.extend(read_lines(p)?);
    }
    let mut relation_labels = a.relation_labels.clone();
    if let Some(p) = &a.relation_labels_file {
        relation_labels.extend(read_lines(p)?);
    }
    if entity_labels.is_empty() {
        bail!("at least one entity label is required (--entity-label or --entity-labels-file)");
    }
    if texts.is_empty() {
        bail!("no input text (--text or --input)");
    }
    for (name, t) in [("threshold", a.threshold), ("relation-threshold", a.relation_threshold)] {
        if !(0.0..=1.0).contains(&t) {
            bail!("--{name} must lie in [0, 1], got {t}");
        }
    }
    let (model, _) = checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let options = ExtractOptions {
        entity_threshold: a.threshold,
        relation_threshold: a.relation_threshold,
        flat_ner: a.flat_ner,
    };
    let mut resolved = model.config.clone();
    resolved.inference.entity_threshold = a.threshold;
    resolved.inference.relation_threshold = a.relation_threshold;
    resolved.inference.flat_ner = a.flat_ner;
    print_header("resolved configuration", &resolved.to_toml()?);
    eprintln!("# entity labels: {entity_labels:?}\n# relation labels: {relation_labels:?}");

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for text in &texts {
        let tokens = tokenize(text);
        let words: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let extraction = model.extract(&words, &entity_labels, &relation_labels, &options)?;
        let kept = extraction.word_count;
        let result = ExtractionResult::new(text, &tokens[..kept], &extraction, &entity_labels, &relation_labels)?;
        if a.pretty {
            write_pretty(&mut out, &result)?;
        } else {
            serde_json::to_writer(&mut out, &result)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_pretty(out: &mut impl Write, r: &ExtractionResult) -> io::Result<()> {
    writeln!(out, "{}", r.text)?;
    writeln!(out, "  {:<30} {:<20} {:>6}", "entity", "label", "score")?;
    for e in &r.entities {
        writeln!(out, "  {:<30} {:<20} {:>6.3}", e.text, e.label, e.score)?;
    }
    if !r.relations.is_empty() {
        writeln!(out, "  {:<30} {:<20} {:<30} {:>6}", "head", "relation", "tail", "score")?;
        for x in &r.relations {
            writeln!(out, "  {:<30} {:<20} {:<30} {:>6.3}", x.head, x.label, x.tail, x.score)?;
        }
    }
    writeln!(out)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut resolved = model.config.clone();
    if let Some(t) = a.threshold {
        resolved.inference.entity_threshold = t;
    }
    if let Some(t) = a.relation_threshold {
        resolved.inference.relation_threshold = t;
    }
    resolved.inference.flat_ner |= a.flat_ner;
    resolved.validate()?;
    print_header("resolved configuration", &resolved.to_toml()?);
    let data = load_data(&a.data)?;
    let options = ExtractOptions::from_config(&resolved);
    let report = model.evaluate(&data, &model.schema, &model.schema, &options, a.check_entity_types)?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}
