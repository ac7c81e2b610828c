//! Command-line surface. One subcommand per pipeline: validating a
//! knowledge base, listing an instance's affordances, recognizing skills
//! in a pose trace, explaining the difference between two environment
//! states as actions, and planning or applying a restructuring.
//!
//! Exit status 0 means success, 1 means the inputs failed validation, 2
//! means a runtime failure (unreadable files, malformed arguments,
//! interpreter errors). Diagnostics and warnings go to stderr; data goes
//! to stdout unless an output flag redirects it. All outputs are
//! deterministic for identical inputs and flags.

use crate::acts::merge_affordances;
use crate::environment::{diff_environments, EnvironmentState, DEFAULT_HISTORY_DEPTH};
use crate::error::{Diagnostic, KbError, Severity};
use crate::hierarchy::ConceptKind;
use crate::io::{load_hierarchy, load_state, load_trace, serialize_hierarchy};
use crate::recognizer::{export_timeline, ExportFormat, Recognizer, DEFAULT_DEBOUNCE};
use crate::restructure::{apply_plan, extract_all, RestructurePlan};
use crate::value::Value;
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser)]
#[command(
    name = "concept-hierarchy",
    version,
    about = "Knowledge-base engine for household robotics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a knowledge base and report every diagnostic
    Validate {
        /// Knowledge-base JSON document
        hierarchy: PathBuf,
        /// Skip defective entries instead of aborting the load
        #[arg(long)]
        lenient: bool,
    },
    /// List the skills an instance affords and the parameters it can fill
    Affordances {
        /// Knowledge-base JSON document
        hierarchy: PathBuf,
        /// Instance to probe
        instance: String,
        /// Skip defective entries instead of aborting the load
        #[arg(long)]
        lenient: bool,
    },
    /// Recognize skills frame by frame in a pose trace
    Recognize {
        /// Knowledge-base JSON document
        hierarchy: PathBuf,
        /// JSONL pose trace, one frame per line
        trace: PathBuf,
        /// Write the timeline here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Consecutive frames needed to activate or deactivate a skill
        #[arg(long, default_value_t = DEFAULT_DEBOUNCE)]
        debounce: usize,
        /// Frames of pose history to keep
        #[arg(long, default_value_t = DEFAULT_HISTORY_DEPTH)]
        history: usize,
        /// Timeline encoding: json or lanes
        #[arg(long, default_value = "json", value_parser = parse_format)]
        format: ExportFormat,
        /// Skip defective entries instead of aborting the load
        #[arg(long)]
        lenient: bool,
    },
    /// Explain the differences between two environment states as actions
    Diff {
        /// Knowledge-base JSON document
        hierarchy: PathBuf,
        /// Source state (instances section, values only)
        state_a: PathBuf,
        /// Target state (instances section, values only)
        state_b: PathBuf,
        /// Skip defective entries instead of aborting the load
        #[arg(long)]
        lenient: bool,
    },
    /// Plan a knowledge-base restructuring, or apply a reviewed plan
    Restructure {
        /// Knowledge-base JSON document
        hierarchy: PathBuf,
        /// Apply this plan and print the rewritten knowledge base
        #[arg(long, conflicts_with = "plan_out")]
        apply: Option<PathBuf>,
        /// Write the extracted plan here instead of stdout
        #[arg(long)]
        plan_out: Option<PathBuf>,
        /// Skip defective entries instead of aborting the load
        #[arg(long)]
        lenient: bool,
    },
}

fn parse_format(text: &str) -> Result<ExportFormat, String> {
    text.parse()
}

/// Runs the command line and returns the process exit status.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(parsed) => parsed,
        Err(err) => {
            let code = err.exit_code();
            let _ = err.print();
            return if code == 0 { EXIT_OK } else { EXIT_RUNTIME };
        }
    };
    match run(parsed.command) {
        Ok(code) => code,
        Err(KbError::Validation(diags)) => {
            report_diagnostics(&diags);
            EXIT_INVALID
        }
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_RUNTIME
        }
    }
}

fn report_diagnostics(diags: &[Diagnostic]) {
    for diagnostic in diags {
        eprintln!("{diagnostic}");
    }
}

fn write_or_print(target: Option<&Path>, text: &str) -> Result<(), KbError> {
    match target {
        Some(path) => std::fs::write(path, text)
            .map_err(|source| KbError::Io { path: path.display().to_string(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn render_value(value: &Value) -> String {
    match value {
        Value::EntityRef(name) => name.clone(),
        Value::Text(text) => text.clone(),
        Value::Number(n) => format!("{n}"),
        Value::Boolean(b) => b.to_string(),
        Value::Unknown => "unknown".to_string(),
        other => crate::io::encode_value(other).to_string(),
    }
}

fn run(command: Command) -> Result<i32, KbError> {
    match command {
        Command::Validate { hierarchy, lenient } => {
            let (graph, diags) = load_hierarchy(&hierarchy, !lenient)?;
            report_diagnostics(&diags);
            let concepts = graph
                .concepts()
                .filter(|node| {
                    matches!(node.kind, ConceptKind::EntityConcept | ConceptKind::ValueDomain)
                })
                .count();
            println!(
                "{} concepts, {} instances, {} functions, {} skills, {} actions",
                concepts,
                graph.instance_names().count(),
                graph.functions().count(),
                graph.skills().count(),
                graph.actions().count(),
            );
            let errors = diags.iter().any(|d| d.severity == Severity::Error);
            Ok(if errors { EXIT_INVALID } else { EXIT_OK })
        }
        Command::Affordances { hierarchy, instance, lenient } => {
            let (graph, diags) = load_hierarchy(&hierarchy, !lenient)?;
            report_diagnostics(&diags);
            if !graph.has_instance(&instance) {
                return Err(KbError::Other(format!("unknown instance `{instance}`")));
            }
            for (skill, params) in merge_affordances(&graph, &[&instance]) {
                println!("{skill} {}", params.join(" "));
            }
            Ok(EXIT_OK)
        }
        Command::Recognize { hierarchy, trace, out, debounce, history, format, lenient } => {
            let (mut graph, diags) = load_hierarchy(&hierarchy, !lenient)?;
            report_diagnostics(&diags);
            let frames = load_trace(&trace)?;
            let mut env = EnvironmentState::seeded_with_capacity(&graph, history);
            let mut recognizer = Recognizer::with_debounce(debounce);
            for frame in frames {
                recognizer.step(&mut graph, &mut env, frame)?;
            }
            recognizer.finish(&mut graph, &mut env);
            for warning in &env.warnings {
                eprintln!("warning: {warning}");
            }
            for warning in &recognizer.warnings {
                eprintln!("warning: {warning}");
            }
            let text = export_timeline(recognizer.timeline(), format);
            write_or_print(out.as_deref(), &text)?;
            Ok(EXIT_OK)
        }
        Command::Diff { hierarchy, state_a, state_b, lenient } => {
            let (graph, diags) = load_hierarchy(&hierarchy, !lenient)?;
            report_diagnostics(&diags);
            let a = load_state(&graph, &state_a)?;
            let b = load_state(&graph, &state_b)?;
            let report = diff_environments(&a, &b);
            for action in &report.actions {
                let params: Vec<String> = action
                    .params
                    .iter()
                    .map(|(name, value)| format!("{name}={}", render_value(value)))
                    .collect();
                println!("{} {}", action.action, params.join(" "));
            }
            for atom in &report.unexplained {
                println!("unexplained: {}", atom.describe());
            }
            for note in &report.missing_instances {
                println!("note: {note}");
            }
            Ok(EXIT_OK)
        }
        Command::Restructure { hierarchy, apply, plan_out, lenient } => {
            let (mut graph, diags) = load_hierarchy(&hierarchy, !lenient)?;
            report_diagnostics(&diags);
            match apply {
                Some(plan_path) => {
                    let text = std::fs::read_to_string(&plan_path).map_err(|source| {
                        KbError::Io { path: plan_path.display().to_string(), source }
                    })?;
                    let plan: RestructurePlan =
                        serde_json::from_str(&text).map_err(|source| KbError::Json {
                            path: plan_path.display().to_string(),
                            source,
                        })?;
                    apply_plan(&mut graph, &plan)?;
                    let document = serde_json::to_string_pretty(&serialize_hierarchy(&graph))
                        .expect("hierarchy serializes");
                    println!("{document}");
                }
                None => {
                    let plan = extract_all(&graph);
                    for note in &plan.notes {
                        eprintln!("note: {note}");
                    }
                    let mut text =
                        serde_json::to_string_pretty(&plan).expect("plan serializes");
                    text.push('\n');
                    write_or_print(plan_out.as_deref(), &text)?;
                }
            }
            Ok(EXIT_OK)
        }
    }
}
