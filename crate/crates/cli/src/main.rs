use std::fs::{self, File};
use std::io::{BufRead, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use garmentflow::backbone::Backbone;
use garmentflow::harness::acceptance::{model_checks, no_switch_readout, unit_checks, Outcome};
use garmentflow::harness::pipeline::{
    distill_dmd, distill_tf, load_backbone, save_backbone, train_teacher, write_artifacts,
    write_dmd_csv, write_loss_csv, Trained,
};
use garmentflow::harness::switch::{evaluate_switch, run_script, session_config};
use garmentflow::harness::{generate_dataset, write_samples_csv, Dataset, HarnessConfig};
use garmentflow::kvcache::write_trace_csv;
use garmentflow::session::{parse_event_script, parse_script_line, Session, SwitchCommand};

#[derive(Parser)]
#[command(
    name = "garmentflow",
    version,
    about = "Streaming garment-switch video generation on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; defaults to the smoke configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for checkpoints and CSV reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Rollout {
    /// Evaluation clip whose conditions start the stream.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 8)]
    chunks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the synthetic dataset and writes its index and latents.
    Dataset(Common),
    /// Flow-matching pre-training of the bidirectional teacher.
    TrainTeacher(Common),
    /// Teacher-forcing stage; reads `teacher.ck` from the output directory.
    DistillTf(Common),
    /// Reward-weighted distribution matching; reads `teacher.ck` and `student.ck`.
    DistillDmd(Common),
    /// Streams chunks from `generator.ck`, optionally switching garments.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rollout: Rollout,
        /// Event script, one `<chunk> <garment> [--no-withdraw] [--no-disentangle]` per line.
        #[arg(long, conflicts_with = "interactive")]
        script: Option<PathBuf>,
        /// Reads commands from stdin: an empty line or `next` generates a chunk,
        /// a script line queues a switch, `quit` stops.
        #[arg(long)]
        interactive: bool,
    },
    /// Per-chunk attention mass on conditions and history.
    AnalyzeAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rollout: Rollout,
    },
    /// Trains every stage and runs the acceptance suite.
    Accept(Common),
}

fn load_config(c: &Common) -> garmentflow::Result<HarnessConfig> {
    let mut cfg = match &c.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            garmentflow::Error::Config(format!("override `{kv}` is not key=value"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load(dir: &Path, name: &str) -> Result<Backbone> {
    let path = dir.join(format!("{name}.ck"));
    load_backbone(&path, name).with_context(|| format!("loading {}", path.display()))
}

fn prepare(c: &Common) -> Result<(HarnessConfig, Dataset)> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    let data = generate_dataset(cfg.samples, cfg.seed, &cfg)?;
    Ok((cfg, data))
}

fn dataset(c: &Common) -> Result<()> {
    let (_, data) = prepare(c)?;
    write_samples_csv(&data, create(&c.out, "samples.csv")?)?;
    let dir = c.out.join("latents");
    fs::create_dir_all(&dir)?;
    let splits = data.train.iter().chain(&data.eval);
    for (i, s) in splits.enumerate() {
        s.latents.write_csv(create(&dir, &format!("{i:04}.csv"))?)?;
    }
    println!(
        "{} train + {} eval samples written to {}",
        data.train.len(),
        data.eval.len(),
        c.out.display()
    );
    Ok(())
}

fn report_losses(stage: &str, losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "{stage}: {} steps, loss {first:.4} -> {last:.4}",
            losses.len()
        );
    }
}

fn train_teacher_cmd(c: &Common) -> Result<()> {
    let (cfg, data) = prepare(c)?;
    let (teacher, log) = train_teacher(&cfg, &data)?;
    save_backbone(&teacher, "teacher", &c.out.join("teacher.ck"))?;
    write_loss_csv("teacher", &log, create(&c.out, "teacher_loss.csv")?)?;
    report_losses("teacher", &log);
    Ok(())
}

fn distill_tf_cmd(c: &Common) -> Result<()> {
    let (cfg, data) = prepare(c)?;
    let teacher = load(&c.out, "teacher")?;
    let (student, log) = distill_tf(&cfg, &teacher, &data)?;
    save_backbone(&student, "student", &c.out.join("student.ck"))?;
    write_loss_csv("teacher-forcing", &log, create(&c.out, "tf_loss.csv")?)?;
    report_losses("teacher-forcing", &log);
    Ok(())
}

fn distill_dmd_cmd(c: &Common) -> Result<()> {
    let (cfg, data) = prepare(c)?;
    let teacher = load(&c.out, "teacher")?;
    let student = load(&c.out, "student")?;
    let (generator, log) = distill_dmd(&cfg, &teacher, &student, &data)?;
    save_backbone(&generator, "generator", &c.out.join("generator.ck"))?;
    write_dmd_csv(&log, create(&c.out, "dmd_log.csv")?)?;
    println!("dmd: {} generator steps", log.len());
    Ok(())
}

fn start_session(cfg: &HarnessConfig, data: &Dataset, out: &Path, r: &Rollout) -> Result<Session> {
    let s = data
        .eval
        .get(r.sample)
        .with_context(|| format!("no evaluation sample {}", r.sample))?;
    Ok(Session::start(
        load(out, "generator")?,
        data.codec.clone(),
        session_config(cfg),
        s.conditions.clone(),
        r.seed,
    )?)
}

fn write_stream(out: &Path, session: &Session) -> Result<()> {
    session.latents()?.write_csv(create(out, "latents.csv")?)?;
    session.pixels()?.write_csv(create(out, "pixels.csv")?)?;
    write_trace_csv(session.trace(), create(out, "trace.csv")?)?;
    Ok(())
}

fn generate_script(c: &Common, r: &Rollout, script: Option<&Path>) -> Result<()> {
    let (cfg, data) = prepare(c)?;
    let lines = match script {
        Some(p) => parse_event_script(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => Vec::new(),
    };
    let s = data
        .eval
        .get(r.sample)
        .with_context(|| format!("no evaluation sample {}", r.sample))?;
    let generator = load(&c.out, "generator")?;
    let session = run_script(
        &generator,
        &data,
        &cfg,
        s.conditions.clone(),
        &lines,
        r.chunks,
        r.seed,
    )?;
    write_stream(&c.out, &session)?;
    if !lines.is_empty() {
        let metrics = evaluate_switch(&data, &session.latents()?, cfg.chunk, s.garment_id, &lines)?;
        let mut w = create(&c.out, "switch_metrics.csv")?;
        use std::io::Write;
        writeln!(w, "switch_chunk,garment,pre_vs_old,post_vs_old,post_vs_new,boundary_delta,median_intra_delta")?;
        for (l, m) in lines.iter().zip(&metrics) {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                l.chunk,
                l.garment,
                m.pre_vs_old,
                m.post_vs_old,
                m.post_vs_new,
                m.continuity.boundary,
                m.continuity.median_intra
            )?;
        }
    }
    println!("{} chunks written to {}", r.chunks, c.out.display());
    Ok(())
}

enum Input {
    Next,
    Line(String),
    Quit,
}

fn generate_interactive(c: &Common, r: &Rollout) -> Result<()> {
    let (cfg, data) = prepare(c)?;
    let mut session = start_session(&cfg, &data, &c.out, r)?;
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            let msg = match line.trim() {
                "" | "next" => Input::Next,
                "quit" => Input::Quit,
                other => Input::Line(other.to_string()),
            };
            if tx.send(msg).is_err() {
                return;
            }
        }
        let _ = tx.send(Input::Quit);
    });
    while session.chunk_counter() < r.chunks {
        match rx.recv().unwrap_or(Input::Quit) {
            Input::Quit => break,
            Input::Next => {
                session.step()?;
                let row = session.trace().last().expect("a chunk was just generated");
                println!(
                    "chunk {} done; retained {:?}; events {}",
                    row.chunk,
                    row.retained,
                    if row.events.is_empty() {
                        "-".to_string()
                    } else {
                        row.events.join("+")
                    }
                );
            }
            Input::Line(text) => {
                let cmd = parse_script_line(&text)
                    .map_err(anyhow::Error::msg)
                    .and_then(|l| {
                        Ok(SwitchCommand {
                            target_chunk: l.chunk,
                            garment: data.garment_latent(l.garment)?,
                            withdraw: l.withdraw,
                            disentangle: l.disentangle,
                        })
                    });
                match cmd.and_then(|cmd| Ok(session.enqueue_switch(cmd)?)) {
                    Ok(()) => println!("queued: {text}"),
                    Err(e) => eprintln!("rejected `{text}`: {e}"),
                }
            }
        }
    }
    write_stream(&c.out, &session)?;
    Ok(())
}

fn analyze_attn(c: &Common, r: &Rollout) -> Result<()> {
    let (cfg, data) = prepare(c)?;
    let mut session = start_session(&cfg, &data, &c.out, r)?;
    for _ in 0..r.chunks {
        session.step()?;
    }
    write_trace_csv(session.trace(), create(&c.out, "attention.csv")?)?;
    let rows: Vec<_> = session.trace().iter().filter_map(|t| t.mass).collect();
    if rows.is_empty() {
        bail!("no attention recorded");
    }
    let n = rows.len() as f64;
    println!(
        "mean mass over {} chunks: conditional {:.4}, historical {:.4}, intra {:.4}",
        rows.len(),
        rows.iter().map(|m| m.conditional).sum::<f64>() / n,
        rows.iter().map(|m| m.historical).sum::<f64>() / n,
        rows.iter().map(|m| m.intra).sum::<f64>() / n
    );
    Ok(())
}

fn write_outcomes(out: &Path, outcomes: &[Outcome]) -> Result<()> {
    let mut w = create(out, "acceptance.csv")?;
    use std::io::Write;
    writeln!(w, "id,name,passed,seconds,detail")?;
    for o in outcomes {
        writeln!(
            w,
            "{},{},{},{:.3},\"{}\"",
            o.id,
            o.name,
            o.passed,
            o.seconds,
            o.detail.replace('"', "'")
        )?;
    }
    Ok(())
}

/// Returns whether every check passed.
fn accept(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    let mut outcomes = unit_checks();
    let start = std::time::Instant::now();
    let trained: Trained = garmentflow::harness::train_all(&cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    write_artifacts(&trained, &c.out)?;
    outcomes.extend(model_checks(&trained, seconds));
    for o in &outcomes {
        println!("{o}");
    }
    let (closest, total) = no_switch_readout(&trained)?;
    let drop = trained.teacher_loss_ratio();
    println!("teacher loss tail/head {drop:.3}; no-switch closest to target {closest}/{total}");
    write_outcomes(&c.out, &outcomes)?;
    Ok(
        outcomes.iter().all(|o| o.passed)
            && closest == total
            && drop <= 1.0 - cfg.teacher_loss_drop,
    )
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Dataset(c) => dataset(&c)?,
        Command::TrainTeacher(c) => train_teacher_cmd(&c)?,
        Command::DistillTf(c) => distill_tf_cmd(&c)?,
        Command::DistillDmd(c) => distill_dmd_cmd(&c)?,
        Command::Generate {
            common,
            rollout,
            script,
            interactive,
        } => {
            if interactive {
                generate_interactive(&common, &rollout)?
            } else {
                generate_script(&common, &rollout, script.as_deref())?
            }
        }
        Command::AnalyzeAttn { common, rollout } => analyze_attn(&common, &rollout)?,
        Command::Accept(c) => return accept(&c),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(garmentflow::Error::Config(_))));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
