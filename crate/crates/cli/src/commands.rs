use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use serde::Serialize;

use contextgpt::context::{ContextSnapshot, ContextValue};
use contextgpt::pipeline::{load_windows, read_vector_records, Pipeline, RunSummary};
use contextgpt::rules::compare_over_dataset;
use contextgpt::Example;

use crate::args::{Cli, Command, ContextArg, PoolCommand};

fn inline_or_file(value: &str) -> anyhow::Result<String> {
    match value.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {path}")),
        None => Ok(value.to_string()),
    }
}

pub fn parse_context(arg: &ContextArg, pipeline: &Pipeline) -> anyhow::Result<ContextSnapshot> {
    let text = inline_or_file(&arg.context)?;
    let assignments: BTreeMap<String, ContextValue> = serde_json::from_str(&text)
        .context("context must be a JSON object of variable -> value")?;
    let z = arg
        .z
        .unwrap_or_else(|| pipeline.domain().schema.window_seconds());
    Ok(ContextSnapshot {
        user: None,
        window_seconds: z,
        assignments,
    })
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

#[derive(Serialize)]
struct BatchReport<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    rejected_lines: usize,
    out: &'a Path,
}

/// Runs one command, writing its result to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = cli.pipeline.run_config()?;
    let k = cfg.k;
    if let Command::Serve { port, host } = &cli.command {
        let pipeline = Arc::new(cfg.build()?);
        let addr = format!("{host}:{port}");
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(crate::server::serve(
            pipeline.clone(),
            k,
            cfg.max_in_flight,
            &addr,
        ))?;
        // the blocking HTTP clients must be dropped outside the runtime
        drop(runtime);
        drop(pipeline);
        return Ok(());
    }
    let pipeline = cfg.build()?;
    match cli.command {
        Command::Render(arg) => {
            let snap = parse_context(&arg, &pipeline)?;
            writeln!(out, "{}", pipeline.describe(&snap)?)?;
        }
        Command::Select(arg) => {
            let snap = parse_context(&arg, &pipeline)?;
            let prepared = pipeline.prepare(&snap, k)?;
            let rows: Vec<_> = prepared
                .selected
                .iter()
                .map(|s| serde_json::json!({"id": s.example.id, "score": s.score}))
                .collect();
            print_json(
                out,
                &serde_json::json!({"k": k, "selected": rows, "warnings": prepared.warnings}),
            )?;
        }
        Command::Probe { context, dry_run } => {
            let snap = parse_context(&context, &pipeline)?;
            if dry_run {
                print_json(out, &pipeline.prepare(&snap, k)?)?;
            } else {
                print_json(out, &pipeline.probe(&snap, k)?)?;
            }
        }
        Command::Batch {
            input,
            out: path,
            summary,
        } => {
            let ingest = load_windows(&input, pipeline.domain())?;
            for bad in &ingest.rejected {
                log::warn!("{}:{}: {}", input.display(), bad.line, bad.message);
            }
            let result = pipeline.run_batch(&ingest.records, k, cfg.max_in_flight)?;
            let file =
                File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            result.write_jsonl(BufWriter::new(file))?;
            let summary_path = summary.unwrap_or_else(|| with_suffix(&path, ".summary.json"));
            let report = BatchReport {
                summary: &result.summary,
                rejected_lines: ingest.rejected.len(),
                out: &path,
            };
            std::fs::write(&summary_path, serde_json::to_vec_pretty(&report)?)?;
            print_json(out, &report)?;
        }
        Command::Compare { input, out: path } => {
            let rules = cfg
                .rule_set(pipeline.domain())?
                .context("compare needs --rules")?;
            let records = read_vector_records(&input)?;
            let report = compare_over_dataset(&records, &rules, pipeline.domain())?;
            let file =
                File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            report.write_csv(BufWriter::new(file))?;
            let aggregate = report.aggregate_json();
            std::fs::write(
                path.with_extension("json"),
                serde_json::to_vec_pretty(&aggregate)?,
            )?;
            print_json(out, &aggregate)?;
        }
        Command::Pool(cmd) => pool_command(cmd, &pipeline, out)?,
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn pool_command(cmd: PoolCommand, pipeline: &Pipeline, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        PoolCommand::List => {
            for example in pipeline.pool().list() {
                writeln!(
                    out,
                    "{}\t{}\t[{}]",
                    example.id,
                    example.snapshot().canonical_key(),
                    example.consistent.join(", ")
                )?;
            }
        }
        PoolCommand::Add { example } => {
            let example: Example = serde_json::from_str(&inline_or_file(&example)?)?;
            let id = example.id.clone();
            pipeline.add_example(example)?;
            writeln!(out, "added {id}")?;
        }
        PoolCommand::Rm { id } => {
            pipeline.remove_example(&id)?;
            writeln!(out, "removed {id}")?;
        }
        PoolCommand::Embed => {
            let outcome = pipeline.refresh_embeddings();
            for (id, err) in &outcome.failures {
                log::error!("{id}: {err}");
            }
            writeln!(
                out,
                "{} embedded ({} computed, {} reused, {} failed)",
                outcome.embedded.len(),
                outcome.computed,
                outcome.reused,
                outcome.failures.len()
            )?;
            anyhow::ensure!(
                outcome.failures.is_empty(),
                "some examples could not be embedded"
            );
        }
    }
    Ok(())
}
