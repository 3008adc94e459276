//! One function per subcommand. Each reads its inputs from files, writes
//! its outputs under `--out-dir` and finishes with a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use s2st::corpus::{
    corpus_stats, filter_by_similarity, generate_toy_corpus, read_frames, read_manifest, write_frames,
    write_manifest, Manifest, SpeechFrames, DEFAULT_FRAME_RATE,
};
use s2st::evaluation::{corpus_bleu, corpus_meteor, run_ablation, AblationSuite, EvalReport, SystemRow};
use s2st::pipeline::{train_model as fit_model, SharedStages, S2stSystem, TokenizerArtifact};
use s2st::training::{write_loss_log, TrainState};
use s2st::vocoder::{prompt_partners, SpeakerEmbedder};

use crate::config::{self, CliConfig};
use crate::error::{CliError, CliResult};
use crate::files;
use crate::run::Run;
use crate::{GlobalArgs, TrainArgs};

fn load_config(g: &GlobalArgs, extra: Vec<String>) -> CliResult<CliConfig> {
    let mut sets = g.set.clone();
    sets.extend(extra);
    config::load(g.config.as_deref(), &sets, g.seed)
}

fn opt(key: &str, v: Option<impl ToString>) -> Option<String> {
    v.map(|v| format!("{key}={}", v.to_string()))
}

fn read_checked_manifest(run: &mut Run, path: &Path) -> CliResult<Manifest> {
    run.input(path)?;
    Ok(read_manifest(path)?)
}

/// Loads a checkpoint. Files that exist but do not fit this build (wrong
/// kind, shapes or config) are version errors, not input errors.
fn load_checkpoint<T>(run: &mut Run, path: &Path, load: fn(&Path) -> s2st::Result<T>) -> CliResult<T> {
    run.input(path)?;
    load(path).map_err(|e| match e {
        s2st::Error::Io { .. } | s2st::Error::Format { .. } | s2st::Error::VersionMismatch { .. } => e.into(),
        other => CliError::incompatible(path, other),
    })
}

fn read_frame_file(run: &mut Run, path: &Path) -> CliResult<SpeechFrames> {
    run.input(path)?;
    Ok(read_frames(path, DEFAULT_FRAME_RATE)?)
}

/// File-name-safe form of an utterance id or variant name.
pub fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn make_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(run: &mut Run, name: &str, v: &impl serde::Serialize) -> CliResult<()> {
    run.write_text(name, &(serde_json::to_string_pretty(v).expect("serializable") + "\n"))
}

fn write_losses(run: &mut Run, name: &str, state: &TrainState) -> CliResult<()> {
    let p = run.output(name);
    Ok(write_loss_log(&p, &state.losses)?)
}

fn train_summary(state: &TrainState) -> String {
    format!(
        "steps={}\nepochs={}\nbest_val_loss={}\nbest_step={}\nearly_stopped={}\n",
        state.step(),
        state.epoch(),
        state.best_val().map_or("none".into(), |v| v.to_string()),
        state.best_step().map_or("none".into(), |v| v.to_string()),
        state.early_stopped()
    )
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Total pairs, held-out ones included.
    #[arg(long)]
    pairs: Option<usize>,
    /// Pairs split off the end into val.jsonl; 0 writes one corpus.jsonl.
    #[arg(long)]
    val_pairs: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Symbols per language.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

pub fn gen_corpus(g: &GlobalArgs, a: GenCorpusArgs) -> CliResult<()> {
    let extra = [
        opt("corpus.pairs", a.pairs),
        opt("val_pairs", a.val_pairs),
        opt("corpus.speakers", a.speakers),
        opt("corpus.min_len", a.min_len),
        opt("corpus.max_len", a.max_len),
        opt("corpus.src_vocab", a.vocab),
        opt("corpus.tgt_vocab", a.vocab),
        a.noise_std.map(|v| format!("corpus.noise_std={v:?}")),
    ];
    let cfg = load_config(g, extra.into_iter().flatten().collect())?;
    let mut run = Run::new("gen-corpus", &g.out_dir)?;
    if cfg.val_pairs >= cfg.corpus.pairs && cfg.val_pairs > 0 {
        return Err(CliError::usage(format!(
            "val_pairs ({}) must be smaller than pairs ({})",
            cfg.val_pairs, cfg.corpus.pairs
        )));
    }
    let m = generate_toy_corpus(&cfg.corpus, cfg.seed)?;
    let mut stats = String::new();
    let parts = if cfg.val_pairs == 0 {
        vec![("corpus", m)]
    } else {
        let (train, val) = m.split_at(m.len() - cfg.val_pairs);
        vec![("train", train), ("val", val)]
    };
    for (name, part) in &parts {
        let file = format!("{name}.jsonl");
        write_manifest(part, &run.output(&file))?;
        run.output(&format!("{name}.frames/"));
        stats.push_str(&corpus_stats(part).render_table());
    }
    run.write_text("corpus_stats.txt", &stats)?;
    print!("{stats}");
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Keep pairs with similarity strictly above this.
    #[arg(long)]
    threshold: Option<f64>,
}

pub fn filter(g: &GlobalArgs, a: FilterArgs) -> CliResult<()> {
    let cfg = load_config(g, a.threshold.map(|t| format!("similarity_threshold={t:?}")).into_iter().collect())?;
    let mut run = Run::new("filter", &g.out_dir)?;
    let m = read_checked_manifest(&mut run, &a.manifest)?;
    let kept = filter_by_similarity(&m, cfg.similarity_threshold);
    let stem = a.manifest.file_stem().map_or("manifest".into(), |s| s.to_string_lossy().into_owned());
    write_manifest(&kept, &run.output(&format!("{stem}.filtered.jsonl")))?;
    run.output(&format!("{stem}.filtered.frames/"));
    let report = format!(
        "threshold={}\ninput={}\nkept={}\ndropped={}\n",
        cfg.similarity_threshold,
        m.len(),
        kept.len(),
        m.len() - kept.len()
    );
    run.write_text(&format!("{stem}.filter.kv"), &report)?;
    print!("{report}{}", corpus_stats(&kept).render_table());
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Codebook entries.
    #[arg(long)]
    codebook_size: Option<usize>,
    #[command(flatten)]
    train_args: TrainArgs,
}

pub fn train_tokenizer(g: &GlobalArgs, a: TrainTokenizerArgs) -> CliResult<()> {
    let mut extra = a.train_args.assignments("pipeline.tokenizer_train");
    extra.extend(opt("pipeline.tokenizer.codebook_size", a.codebook_size));
    let cfg = load_config(g, extra)?;
    let mut run = Run::new("train-tokenizer", &g.out_dir)?;
    let train = read_checked_manifest(&mut run, &a.train)?;
    let val = read_checked_manifest(&mut run, &a.val)?;
    let (art, state) = TokenizerArtifact::train(&cfg.pipeline, &train, &val)?;
    art.save(&run.output("tokenizer.ckpt"))?;
    write_losses(&mut run, "tokenizer_loss.jsonl", &state)?;
    let used = art.symbols.symbol.iter().filter(|s| s.is_some()).count();
    let report = format!(
        "{}purity={}\ncodebook_size={}\ncodes_with_symbol={used}\n",
        train_summary(&state),
        art.symbols.purity(),
        art.tokenizer.cfg.codebook_size
    );
    run.write_text("tokenizer_report.kv", &report)?;
    print!("{report}");
    run.finish(&cfg)
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Side {
    Src,
    Tgt,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "tgt")]
    side: Side,
    /// Output file name inside the out dir.
    #[arg(long, default_value = "tokens.txt")]
    output: String,
}

pub fn tokenize(g: &GlobalArgs, a: TokenizeArgs) -> CliResult<()> {
    let cfg = load_config(g, Vec::new())?;
    let mut run = Run::new("tokenize", &g.out_dir)?;
    let art = load_checkpoint(&mut run, &a.tokenizer, TokenizerArtifact::load)?;
    let m = read_checked_manifest(&mut run, &a.manifest)?;
    let mut lines = Vec::with_capacity(m.len());
    for r in &m.records {
        let frames = match a.side {
            Side::Src => &r.src_frames,
            Side::Tgt => &r.tgt_frames,
        };
        lines.push((r.id.clone(), art.tokenizer.tokenize(frames)?));
    }
    run.write_text(&a.output, &files::render(&lines))?;
    println!("tokenized {} utterances", lines.len());
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct TrainModelArgs {
    /// Checkpoint written by `train-tokenizer`.
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    train_args: TrainArgs,
}

/// Tokenizer checkpoint plus freshly trained vocoder, sized to `train`.
fn shared_from_tokenizer(
    cfg: &CliConfig,
    art: TokenizerArtifact,
    train: &Manifest,
    val: &Manifest,
) -> CliResult<SharedStages> {
    let mut pipeline = cfg.pipeline.clone();
    pipeline.tokenizer = art.cfg.tokenizer.clone();
    pipeline.fit_to(train, art.cfg.tokenizer.text_vocab)?;
    let log = TrainState::new(&art.tokenizer.store);
    Ok(SharedStages::from_tokenizer(&pipeline, art.tokenizer, art.symbols, log, train, val)?)
}

pub fn train_model(g: &GlobalArgs, a: TrainModelArgs) -> CliResult<()> {
    let cfg = load_config(g, a.train_args.assignments("pipeline.model_train"))?;
    let mut run = Run::new("train-model", &g.out_dir)?;
    let art = load_checkpoint(&mut run, &a.tokenizer, TokenizerArtifact::load)?;
    let train = read_checked_manifest(&mut run, &a.train)?;
    let val = read_checked_manifest(&mut run, &a.val)?;
    let shared = shared_from_tokenizer(&cfg, art, &train, &val)?;
    log::info!("training translation model");
    let (model, state) = fit_model(
        &shared.cfg.model,
        &shared.cfg.model_train,
        &train,
        &shared.train_tokens,
        &val,
        &shared.val_tokens,
    )?;
    shared.with_model(model).save(&run.output("system.ckpt"))?;
    write_losses(&mut run, "vocoder_loss.jsonl", &shared.vocoder_log)?;
    write_losses(&mut run, "model_loss.jsonl", &state)?;
    let report = train_summary(&state);
    run.write_text("model_report.kv", &report)?;
    print!("{report}");
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    system: PathBuf,
    /// Translate every record; each is prompted by another utterance of
    /// its speaker.
    #[arg(long, conflicts_with_all = ["src", "prompt"])]
    manifest: Option<PathBuf>,
    /// Single source frame file (needs --prompt).
    #[arg(long, requires = "prompt")]
    src: Option<PathBuf>,
    /// Prompt frame file giving the output voice.
    #[arg(long, requires = "src")]
    prompt: Option<PathBuf>,
    /// Utterance id used for a single --src.
    #[arg(long, default_value = "utt")]
    id: String,
}

struct Job {
    id: String,
    src: SpeechFrames,
    prompt: SpeechFrames,
    reference: Option<Vec<usize>>,
}

pub fn translate(g: &GlobalArgs, a: TranslateArgs) -> CliResult<()> {
    let cfg = load_config(g, Vec::new())?;
    let mut run = Run::new("translate", &g.out_dir)?;
    let sys = load_checkpoint(&mut run, &a.system, S2stSystem::load)?;
    let jobs = match (&a.manifest, &a.src, &a.prompt) {
        (Some(path), _, _) => {
            let m = read_checked_manifest(&mut run, path)?;
            let partners = prompt_partners(&m);
            m.records
                .iter()
                .enumerate()
                .map(|(i, r)| Job {
                    id: r.id.clone(),
                    src: r.src_frames.clone(),
                    prompt: m.records[partners[i]].tgt_frames.clone(),
                    reference: Some(r.tgt_text.clone()),
                })
                .collect::<Vec<_>>()
        }
        (None, Some(src), Some(prompt)) => vec![Job {
            id: a.id.clone(),
            src: read_frame_file(&mut run, src)?,
            prompt: read_frame_file(&mut run, prompt)?,
            reference: None,
        }],
        _ => return Err(CliError::usage("give --manifest, or --src with --prompt")),
    };
    let frames_dir = run.output("frames/");
    let prompts_dir = run.output("prompts/");
    make_dir(&frames_dir)?;
    make_dir(&prompts_dir)?;
    let (mut text, mut tokens, mut transcripts, mut refs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut truncated = 0;
    for job in &jobs {
        let tr = sys.translate(&job.src, &job.prompt)?;
        let name = format!("{}.ds2f", sanitize(&job.id));
        write_frames(&tr.frames, &frames_dir.join(&name))?;
        write_frames(&job.prompt, &prompts_dir.join(&name))?;
        transcripts.push((job.id.clone(), sys.transcribe(&tr.frames)?));
        text.push((job.id.clone(), tr.text));
        tokens.push((job.id.clone(), tr.tokens));
        if let Some(r) = &job.reference {
            refs.push((job.id.clone(), r.clone()));
        }
        truncated += usize::from(tr.truncated);
    }
    run.write_text("text.txt", &files::render(&text))?;
    run.write_text("tokens.txt", &files::render(&tokens))?;
    run.write_text("transcripts.txt", &files::render(&transcripts))?;
    if !refs.is_empty() {
        run.write_text("references.txt", &files::render(&refs))?;
    }
    println!("translated {} utterances ({truncated} truncated)", jobs.len());
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    system: PathBuf,
    /// Token file, one `id<TAB>tokens` line per utterance.
    #[arg(long)]
    tokens: PathBuf,
    /// Prompt frame file giving the voice.
    #[arg(long)]
    prompt: PathBuf,
}

pub fn synthesize(g: &GlobalArgs, a: SynthesizeArgs) -> CliResult<()> {
    let cfg = load_config(g, Vec::new())?;
    let mut run = Run::new("synthesize", &g.out_dir)?;
    let sys = load_checkpoint(&mut run, &a.system, S2stSystem::load)?;
    run.input(&a.tokens)?;
    let lines = files::read(&a.tokens)?;
    let prompt = read_frame_file(&mut run, &a.prompt)?;
    let spk = sys.vocoder.embed_speaker(&prompt)?;
    let dir = run.output("frames/");
    make_dir(&dir)?;
    for (id, toks) in &lines {
        let frames = sys.vocoder.synthesize(toks, &spk)?;
        write_frames(&frames, &dir.join(format!("{}.ds2f", sanitize(id))))?;
    }
    println!("synthesized {} utterances", lines.len());
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Hypothesis symbol file (e.g. transcripts.txt from `translate`).
    #[arg(long)]
    hyp: PathBuf,
    /// Reference symbol file.
    #[arg(long)]
    r#ref: PathBuf,
    /// Directory of generated `<id>.ds2f` frames, for speaker similarity.
    #[arg(long, requires = "prompt_frames")]
    gen_frames: Option<PathBuf>,
    /// Directory of the matching prompt frames.
    #[arg(long, requires = "gen_frames")]
    prompt_frames: Option<PathBuf>,
    /// System name in the report row.
    #[arg(long, default_value = "s2st")]
    name: String,
}

pub fn eval(g: &GlobalArgs, a: EvalArgs) -> CliResult<()> {
    let cfg = load_config(g, Vec::new())?;
    let mut run = Run::new("eval", &g.out_dir)?;
    run.input(&a.hyp)?;
    run.input(&a.r#ref)?;
    let hyp_lines = files::read(&a.hyp)?;
    let refs: BTreeMap<String, Vec<usize>> = files::read(&a.r#ref)?.into_iter().collect();
    let mut hyps = Vec::with_capacity(hyp_lines.len());
    let mut matched = Vec::with_capacity(hyp_lines.len());
    for (id, h) in &hyp_lines {
        let r = refs
            .get(id)
            .ok_or_else(|| CliError::usage(format!("hypothesis `{id}` has no reference in {}", a.r#ref.display())))?;
        hyps.push(h.clone());
        matched.push(r.clone());
    }
    let speaker_sim = match (&a.gen_frames, &a.prompt_frames) {
        (Some(gen_dir), Some(prompt_dir)) => {
            run.input(gen_dir)?;
            run.input(prompt_dir)?;
            let v = &cfg.pipeline.vocoder;
            let mut embedder = None;
            let mut sims = Vec::new();
            for (id, _) in &hyp_lines {
                let name = format!("{}.ds2f", sanitize(id));
                let gen = read_frames(&gen_dir.join(&name), DEFAULT_FRAME_RATE)?;
                if gen.num_frames() == 0 {
                    continue;
                }
                let prompt = read_frames(&prompt_dir.join(&name), DEFAULT_FRAME_RATE)?;
                let emb = embedder.get_or_insert_with(|| {
                    SpeakerEmbedder::new(gen.features(), v.speaker_hidden, v.speaker_dim, v.embedder_seed)
                        .with_std_weight(v.speaker_std_weight)
                });
                sims.push(s2st::evaluation::speaker_similarity(&gen, &prompt, emb)?);
            }
            (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64)
        }
        _ => None,
    };
    let corpus = a.r#ref.file_stem().map_or("corpus".into(), |s| s.to_string_lossy().into_owned());
    let mut report = EvalReport::new(corpus);
    report.push(SystemRow {
        system: a.name.clone(),
        bleu: corpus_bleu(&hyps, &matched)?,
        meteor: corpus_meteor(&hyps, &matched)?,
        speaker_sim,
        count: hyps.len(),
        extra: Default::default(),
    })?;
    let table = report.render_table();
    run.write_text("report.txt", &table)?;
    run.write_text("report.kv", &report.render_kv())?;
    write_json(&mut run, "report.json", &report)?;
    print!("{table}");
    run.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// `projectors` or `token-source`.
    suite: AblationSuite,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Reuse a trained tokenizer instead of training one.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[command(flatten)]
    train_args: TrainArgs,
}

pub fn ablate(g: &GlobalArgs, a: AblateArgs) -> CliResult<()> {
    let cfg = load_config(g, a.train_args.assignments("pipeline.model_train"))?;
    let mut run = Run::new("ablate", &g.out_dir)?;
    let art = match &a.tokenizer {
        Some(p) => Some(load_checkpoint(&mut run, p, TokenizerArtifact::load)?),
        None => None,
    };
    let train = read_checked_manifest(&mut run, &a.train)?;
    let val = read_checked_manifest(&mut run, &a.val)?;
    let shared = match art {
        Some(art) => shared_from_tokenizer(&cfg, art, &train, &val)?,
        None => SharedStages::train(&cfg.pipeline, &train, &val)?,
    };
    let report = run_ablation(a.suite, &shared, &train, &val)?;
    let base = format!("ablation_{}", sanitize(a.suite.name()));
    for v in &report.variants {
        let p = run.output(&format!("{base}_{}.loss.jsonl", sanitize(&v.name)));
        write_loss_log(&p, &v.losses)?;
    }
    let table = report.render_table();
    run.write_text(&format!("{base}.txt"), &table)?;
    run.write_text(&format!("{base}.kv"), &report.render_kv())?;
    write_json(&mut run, &format!("{base}.json"), &report)?;
    print!("{table}");
    run.finish(&cfg)
}
