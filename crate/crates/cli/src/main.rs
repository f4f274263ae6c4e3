//! Command-line front end: generate motif models, embed watermarks, run
//! NSO attacks and recovery, verify ownership, and drive the
//! false-positive and benchmark sweeps. All artifacts are JSON on disk.
//!
//! The environment variable `CANONET_SEED` overrides every seed argument.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use canonet_core::attack::{attack, AttackConfig, AttackVariant, Camouflage};
use canonet_core::graph::{graph_from_json, graph_to_json, motif, Graph, NodeId};
use canonet_core::harness::{
    bench_csv, default_watermark_layer, fp_eval, run_bench, run_pipeline, BenchSweep,
    PipelineSpec,
};
use canonet_core::recovery::{recover, ProbeConfig, RecoveryConfig};
use canonet_core::verifier::{verify, CertificateConfig, Tier2Config};
use canonet_core::watermark::{embed, extract_similarity, keygen, WatermarkKey};

#[derive(Parser)]
#[command(
    name = "canonet",
    about = "Function-preserving structural obfuscation attacks and graph-consistent recovery on small CNN models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Injection ratio rho in [0, 1]
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    /// zero | clique | split | mix_opseq | mix_opseq_per_merge_group
    #[arg(long, default_value = "zero")]
    variant: String,
    /// Primitive sequence length for the mix variants
    #[arg(long, default_value_t = 3)]
    opseq_len: usize,
    /// Relative position of the split baseline channel
    #[arg(long, default_value_t = 1.0)]
    split_p: f64,
    /// none | perm | scale | perm_and_scale
    #[arg(long, default_value = "none")]
    camouflage: String,
    #[arg(long, default_value_t = 0.6)]
    scale_lo: f64,
    #[arg(long, default_value_t = 1.4)]
    scale_hi: f64,
}

impl AttackArgs {
    fn to_config(&self, seed: u64) -> Result<AttackConfig> {
        Ok(AttackConfig {
            ratio: self.ratio,
            variant: AttackVariant::parse(&self.variant)
                .ok_or_else(|| anyhow!("unknown attack variant '{}'", self.variant))?,
            opseq_len: self.opseq_len,
            split_baseline: self.split_p,
            camouflage: Camouflage::parse(&self.camouflage)
                .ok_or_else(|| anyhow!("unknown camouflage '{}'", self.camouflage))?,
            scale_range: (self.scale_lo, self.scale_hi),
            seed,
        })
    }
}

#[derive(Args, Debug)]
struct RecoverArgs {
    /// Number of probe inputs
    #[arg(long, default_value_t = 32)]
    probes: usize,
    #[arg(long, default_value_t = 0x9E37_79B9)]
    probe_seed: u64,
    /// Magnitude threshold for ratio estimation
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Proportionality tolerance
    #[arg(long, default_value_t = 1e-3)]
    tau: f64,
    /// Minimum valid probes per ratio estimate
    #[arg(long, default_value_t = 3)]
    tmin: usize,
    #[arg(long, default_value_t = 1e-6)]
    gamma_drop: f64,
    #[arg(long, default_value_t = 1e-3)]
    gamma_keep: f64,
    /// Disable the post-recovery sanity check
    #[arg(long, default_value_t = false)]
    no_sanity: bool,
    #[arg(long, default_value_t = 1e-7)]
    sanity_tol: f64,
    /// Run the optional second synchronization pass
    #[arg(long, default_value_t = false)]
    second_sync: bool,
    /// Active-ratio gate lower bound (enables the gate)
    #[arg(long)]
    active_lo: Option<f64>,
    /// Active-ratio gate upper bound (enables the gate)
    #[arg(long)]
    active_hi: Option<f64>,
}

impl RecoverArgs {
    fn to_configs(&self) -> (RecoveryConfig, ProbeConfig) {
        let gate = match (self.active_lo, self.active_hi) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (Some(lo), None) => Some((lo, 1.0)),
            (None, Some(hi)) => Some((0.0, hi)),
            (None, None) => None,
        };
        (
            RecoveryConfig {
                epsilon: self.eps,
                tau: self.tau,
                t_min: self.tmin,
                gamma_drop: self.gamma_drop,
                gamma_keep: self.gamma_keep,
                active_ratio_gate: gate,
                sanity_check: !self.no_sanity,
                sanity_tol: self.sanity_tol,
                second_sync_pass: self.second_sync,
                ..RecoveryConfig::default()
            },
            ProbeConfig {
                count: self.probes,
                seed: self.probe_seed,
                ..ProbeConfig::default()
            },
        )
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Tier-1 pass threshold on the worst matched residual
    #[arg(long, default_value_t = 1e-3)]
    perm_tol: f64,
    /// Disable the positive per-channel scaling allowance
    #[arg(long, default_value_t = false)]
    no_scaling: bool,
    /// Append bias to the flattened channel vectors
    #[arg(long, default_value_t = false)]
    include_bias: bool,
    /// Diagnostics: optimal assignment instead of greedy matching
    #[arg(long, default_value_t = false)]
    hungarian: bool,
    /// Tier-2 recovered-fraction requirement
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    /// Tier-2 noise slack
    #[arg(long, default_value_t = 0.02)]
    delta: f64,
}

impl VerifyArgs {
    fn to_configs(&self) -> (CertificateConfig, Tier2Config) {
        (
            CertificateConfig {
                perm_tol: self.perm_tol,
                allow_scaling: !self.no_scaling,
                include_bias: self.include_bias,
                use_hungarian: self.hungarian,
                ..CertificateConfig::default()
            },
            Tier2Config {
                lambda: self.lambda,
                delta: self.delta,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a built-in motif model
    Gen {
        /// mlp | fanout | residual | inception_mini | dense_mini | mixed
        #[arg(long)]
        motif: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Embed the reference watermark into a model
    Embed {
        #[arg(short, long)]
        input: PathBuf,
        /// Target Conv2d/Linear node id (default: first rewritable producer)
        #[arg(long)]
        wm_layer: Option<usize>,
        #[arg(long, default_value_t = 64)]
        wm_bits: usize,
        #[arg(long, default_value_t = 0xC0DE)]
        wm_seed: u64,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        key_out: PathBuf,
    },
    /// Run a graph-consistent NSO attack
    Attack {
        #[arg(short, long)]
        input: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Zero wall-clock fields for byte-stable reports
        #[arg(long, default_value_t = false)]
        no_timings: bool,
    },
    /// Recover a canonical compact model from an attacked one
    Recover {
        #[arg(short, long)]
        input: PathBuf,
        #[command(flatten)]
        recover: RecoverArgs,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        no_timings: bool,
    },
    /// Two-tier verification over clean/attacked/recovered models
    Verify {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        attacked: PathBuf,
        #[arg(long)]
        recovered: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[command(flatten)]
        verify: VerifyArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// End-to-end: gen -> embed -> attack -> recover -> verify
    Pipeline {
        #[arg(long)]
        motif: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        wm_layer: Option<usize>,
        #[arg(long, default_value_t = 64)]
        wm_bits: usize,
        #[arg(long, default_value_t = 0xC0DE)]
        wm_seed: u64,
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        recover: RecoverArgs,
        #[command(flatten)]
        verify: VerifyArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Sabotage switch: skip recovery (pipeline must then fail)
        #[arg(long, default_value_t = false)]
        skip_recovery: bool,
        #[arg(long, default_value_t = false)]
        no_timings: bool,
    },
    /// Recovery false positives on clean watermarked models
    FpEval {
        /// Comma-separated motif list; defaults to all built-ins
        #[arg(long)]
        motifs: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        wm_bits: usize,
        #[command(flatten)]
        recover: RecoverArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Attack+recover sweeps with timing and width-growth accounting
    Bench {
        #[arg(long)]
        motifs: Option<String>,
        /// Comma-separated ratios
        #[arg(long, default_value = "0.2,0.5")]
        ratios: String,
        /// Comma-separated variants
        #[arg(
            long,
            default_value = "zero,clique,split,mix_opseq,mix_opseq_per_merge_group"
        )]
        variants: String,
        /// Comma-separated probe counts
        #[arg(long, default_value = "8,16,32,64")]
        probe_counts: String,
        #[arg(long, default_value_t = 3)]
        opseq_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var("CANONET_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
}

fn seed_or_env(seed: u64) -> u64 {
    env_seed().unwrap_or(seed)
}

fn read_graph(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading model {}", path.display()))?;
    Ok(graph_from_json(&text)?)
}

fn write_graph(g: &Graph, path: &Path) -> Result<()> {
    std::fs::write(path, graph_to_json(g)?)
        .with_context(|| format!("writing model {}", path.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// On-disk key schema; the projection matrix is regenerated from the seed
/// and never serialized.
#[derive(serde::Serialize, serde::Deserialize)]
struct KeyFile {
    seed: u64,
    layer: usize,
    n: usize,
    message: Vec<bool>,
    weight_len: usize,
    note: String,
}

impl KeyFile {
    fn from_key(key: &WatermarkKey) -> Self {
        KeyFile {
            seed: key.seed,
            layer: key.target_layer.0,
            n: key.message.len(),
            message: key.message.clone(),
            weight_len: key.weight_len,
            note: "projection matrix is regenerated from the seed and not serialized".into(),
        }
    }

    fn to_key(&self) -> WatermarkKey {
        WatermarkKey {
            target_layer: NodeId(self.layer),
            message: self.message.clone(),
            weight_len: self.weight_len,
            seed: self.seed,
        }
    }
}

fn read_key(path: &Path) -> Result<WatermarkKey> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading key {}", path.display()))?;
    let kf: KeyFile = serde_json::from_str(&text)?;
    Ok(kf.to_key())
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen {
            motif: name,
            seed,
            out,
        } => {
            let g = motif(&name, seed_or_env(seed))?;
            write_graph(&g, &out)?;
            println!("wrote {} ({} nodes)", out.display(), g.nodes().len());
            Ok(0)
        }
        Command::Embed {
            input,
            wm_layer,
            wm_bits,
            wm_seed,
            max_iters,
            step_size,
            out,
            key_out,
        } => {
            let g = read_graph(&input)?;
            let layer = match wm_layer {
                Some(i) => NodeId(i),
                None => default_watermark_layer(&g)
                    .ok_or_else(|| anyhow!("no rewritable producer to watermark"))?,
            };
            let key = keygen(&g, layer, wm_bits, seed_or_env(wm_seed))?;
            let embedded = embed(&g, &key, max_iters, step_size)?;
            let sim = extract_similarity(&embedded, &key)?;
            write_graph(&embedded, &out)?;
            write_json(&KeyFile::from_key(&key), &key_out)?;
            println!(
                "embedded {} bits into layer n{} (similarity {})",
                wm_bits,
                layer.0,
                sim.value()
            );
            Ok(0)
        }
        Command::Attack {
            input,
            attack: args,
            seed,
            out,
            report,
            no_timings,
        } => {
            let g = read_graph(&input)?;
            let cfg = args.to_config(seed_or_env(seed))?;
            let (attacked, mut rep) = attack(&g, &cfg)?;
            if no_timings {
                rep.strip_timings();
            }
            write_graph(&attacked, &out)?;
            if let Some(p) = report {
                write_json(&rep, &p)?;
            }
            println!(
                "attacked with {} (ratio {}): drift {:e}",
                rep.variant, rep.ratio, rep.functional_drift
            );
            Ok(0)
        }
        Command::Recover {
            input,
            recover: args,
            out,
            report,
            no_timings,
        } => {
            let g = read_graph(&input)?;
            let (rcfg, pcfg) = args.to_configs();
            let (recovered, mut rep) = recover(&g, &rcfg, &pcfg)?;
            if no_timings {
                rep.strip_timings();
            }
            write_graph(&recovered, &out)?;
            if let Some(p) = report {
                write_json(&rep, &p)?;
            }
            println!(
                "recovered: pruned {} of {} params, sanity delta {:e}",
                rep.pruned_params, rep.params_before, rep.sanity_delta
            );
            Ok(0)
        }
        Command::Verify {
            clean,
            attacked,
            recovered,
            key,
            verify: args,
            out,
        } => {
            let g_clean = read_graph(&clean)?;
            let g_attacked = read_graph(&attacked)?;
            let g_recovered = read_graph(&recovered)?;
            let key = read_key(&key)?;
            let (ccfg, t2cfg) = args.to_configs();
            let verdict = verify(&g_clean, &g_attacked, &g_recovered, &key, &ccfg, &t2cfg)?;
            if let Some(p) = out {
                write_json(&verdict, &p)?;
            }
            println!(
                "verdict: {} (clean {:.4}, attacked {:.4}, recovered {:.4})",
                verdict.verdict,
                verdict.sim_clean,
                verdict.sim_attacked,
                verdict.sim_recovered_effective
            );
            Ok(if verdict.pass { 0 } else { 1 })
        }
        Command::Pipeline {
            motif: name,
            seed,
            wm_layer,
            wm_bits,
            wm_seed,
            attack: aargs,
            recover: rargs,
            verify: vargs,
            out_dir,
            skip_recovery,
            no_timings,
        } => {
            let seed = seed_or_env(seed);
            let (rcfg, pcfg) = rargs.to_configs();
            let (ccfg, t2cfg) = vargs.to_configs();
            let spec = PipelineSpec {
                motif: name,
                seed,
                wm_layer,
                wm_bits,
                wm_seed: seed_or_env(wm_seed),
                embed_max_iters: 2000,
                embed_step: 0.05,
                attack: aargs.to_config(seed)?,
                recovery: rcfg,
                probe: pcfg,
                certificate: ccfg,
                tier2: t2cfg,
                skip_recovery,
            };
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let mut art = run_pipeline(&spec)?;
            if no_timings {
                art.report.strip_timings();
            }
            write_graph(&art.clean, &out_dir.join("model_clean.json"))?;
            write_graph(&art.attacked, &out_dir.join("model_attacked.json"))?;
            write_graph(&art.recovered, &out_dir.join("model_recovered.json"))?;
            write_json(&KeyFile::from_key(&art.key), &out_dir.join("key.json"))?;
            write_json(&art.report.attack, &out_dir.join("attack_report.json"))?;
            if let Some(rr) = &art.report.recovery {
                write_json(rr, &out_dir.join("recovery_report.json"))?;
            }
            write_json(&art.report.verdict, &out_dir.join("verdict.json"))?;
            write_json(&art.report, &out_dir.join("pipeline_report.json"))?;
            println!(
                "pipeline {}: verdict {} (widths restored: {})",
                art.report.motif, art.report.verdict.verdict, art.report.widths_restored
            );
            Ok(if art.report.exit_ok { 0 } else { 1 })
        }
        Command::FpEval {
            motifs,
            seed,
            wm_bits,
            recover: rargs,
            out,
        } => {
            let names: Vec<String> = match motifs {
                Some(list) => split_list(&list),
                None => canonet_core::graph::motif_names()
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            };
            let (rcfg, pcfg) = rargs.to_configs();
            let report = fp_eval(
                &names,
                seed_or_env(seed),
                wm_bits,
                &rcfg,
                &pcfg,
                &CertificateConfig::default(),
            )?;
            if let Some(p) = out {
                write_json(&report, &p)?;
            }
            println!(
                "fp-eval: {} cases, layer FP {}/{}, tier-1 {}/{}, clean: {}",
                report.cases.len(),
                report.layers_changed_total,
                report.layers_total,
                report.tier1_passed,
                report.tier1_total,
                report.clean
            );
            Ok(if report.clean { 0 } else { 1 })
        }
        Command::Bench {
            motifs,
            ratios,
            variants,
            probe_counts,
            opseq_len,
            seed,
            out_dir,
        } => {
            let names: Vec<String> = match motifs {
                Some(list) => split_list(&list),
                None => vec!["mlp".into(), "residual".into()],
            };
            let ratios: Vec<f64> = split_list(&ratios)
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| anyhow!("bad ratio '{s}': {e}")))
                .collect::<Result<_>>()?;
            let variants: Vec<AttackVariant> = split_list(&variants)
                .iter()
                .map(|s| AttackVariant::parse(s).ok_or_else(|| anyhow!("unknown variant '{s}'")))
                .collect::<Result<_>>()?;
            let probe_counts: Vec<usize> = split_list(&probe_counts)
                .iter()
                .map(|s| s.parse::<usize>().map_err(|e| anyhow!("bad count '{s}': {e}")))
                .collect::<Result<_>>()?;
            let sweep = BenchSweep {
                motifs: names,
                ratios,
                variants,
                probe_counts,
                opseq_len,
                seed: seed_or_env(seed),
            };
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let report = run_bench(&sweep, &RecoveryConfig::default())?;
            write_json(&report, &out_dir.join("bench_report.json"))?;
            std::fs::write(out_dir.join("bench.csv"), bench_csv(&report))?;
            println!(
                "bench: {} entries, trajectories ok: {}, probe time monotone: {}",
                report.entries.len(),
                report.trajectories_ok,
                report.probe_time_monotone
            );
            Ok(if report.trajectories_ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            let payload = serde_json::json!({ "error": format!("{err:#}") });
            println!("{payload}");
            ExitCode::from(2)
        }
    }
}
