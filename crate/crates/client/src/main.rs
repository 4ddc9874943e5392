use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tocom_client::api::*;
use tocom_client::{Client, DEFAULT_SERVER};

#[derive(Parser)]
#[command(name = "tocom", version, about = "Task-oriented feature compression experiments, run on a tocom server")]
struct Cli {
    /// Server base URL.
    #[arg(long, env = "TOCOM_SERVER", default_value = DEFAULT_SERVER, global = true)]
    server: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check that the server is up.
    Health,
    /// Generate a synthetic multi-camera dataset.
    GenData {
        /// World spec (TOML); the default world when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or both phases from a config file.
    Train {
        #[arg(long, default_value = "all", value_parser = ["1", "2", "all"])]
        phase: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream held-out frames through encode, decode and fusion.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Write per-element bit maps as PGM files here.
        #[arg(long)]
        dump_bitmaps: Option<PathBuf>,
        /// Frame range `START..END`.
        #[arg(long, value_parser = parse_frames)]
        frames: Option<Frames>,
        #[arg(long)]
        config_id: Option<String>,
        #[arg(long)]
        bandwidth_bps: Option<f64>,
        /// Never use the temporal entropy model.
        #[arg(long)]
        hierarchical_only: bool,
    },
    /// Train or load every grid point and evaluate it.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Pixel-codec baseline at bit depth q.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
        q: u8,
        #[arg(long)]
        csv: PathBuf,
        /// Also score the reconstructions with this model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_parser = parse_frames)]
        frames: Option<Frames>,
    },
    /// Encode frames as the devices would and write a packet stream.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_frames)]
        frames: Option<Frames>,
        #[arg(long)]
        hierarchical_only: bool,
    },
    /// Decode a packet stream in a fresh server session.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Print the fused occupancy after the last packet.
        #[arg(long)]
        fuse: bool,
    },
}

fn parse_frames(s: &str) -> Result<Frames, String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let start = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let end = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    if end <= start {
        return Err("END must exceed START".into());
    }
    Ok(Frames { start, end })
}

/// The server resolves paths itself, so relative ones are made absolute here.
fn abs(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))
}

fn abs_opt(p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.as_deref().map(abs).transpose()
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

async fn run(cli: Cli) -> Result<()> {
    let client = Client::new(&cli.server);
    match cli.cmd {
        Cmd::Health => print_json(&client.health().await?)?,
        Cmd::GenData { spec, out } => {
            let r = client.gen_data(&GenDataRequest { spec: abs_opt(&spec)?, out: abs(&out)? }).await?;
            println!("{} frames from {} cameras written to {}", r.frames, r.cameras, r.path.display());
        }
        Cmd::Train { phase, config, out } => {
            let r = client.train(&TrainRequest { config: abs(&config)?, phase, out: abs(&out)? }).await?;
            if let Some(last) = r.log.last() {
                println!(
                    "phase {} step {}: loss {:.4} (distortion {:.4} nats, rate {:.1} bits)",
                    last.phase, last.step, last.loss_total, last.distortion_nats, last.rate_bits
                );
            }
            println!("checkpoint written to {} (tau1 {}, tau2 {})", r.out.display(), r.tau1, r.tau2);
        }
        Cmd::Evaluate { ckpt, data, csv, dump_bitmaps, frames, config_id, bandwidth_bps, hierarchical_only } => {
            let r = client
                .evaluate(&EvaluateRequest {
                    ckpt: abs(&ckpt)?,
                    data: abs(&data)?,
                    csv: Some(abs(&csv)?),
                    dump_bitmaps: abs_opt(&dump_bitmaps)?,
                    frames,
                    config_id,
                    bandwidth_bps,
                    hierarchical_only,
                })
                .await?;
            print_json(&r)?;
        }
        Cmd::Sweep { grid, csv } => {
            let r = client.sweep(&SweepRequest { grid: abs(&grid)?, csv: Some(abs(&csv)?) }).await?;
            println!("{} records written to {}", r.records.len(), csv.display());
        }
        Cmd::Baseline { data, q, csv, ckpt, frames } => {
            let r = client
                .baseline(&BaselineRequest {
                    data: abs(&data)?,
                    q,
                    csv: Some(abs(&csv)?),
                    ckpt: abs_opt(&ckpt)?,
                    frames,
                    bandwidth_bps: None,
                })
                .await?;
            print_json(&r)?;
        }
        Cmd::Encode { ckpt, data, out, frames, hierarchical_only } => {
            let r = client
                .encode(&EncodeRequest { ckpt: abs(&ckpt)?, data: abs(&data)?, frames, out: abs(&out)?, hierarchical_only })
                .await?;
            println!("{} packets, {} bytes written to {}", r.packets, r.bytes, r.out.display());
        }
        Cmd::Decode { ckpt, stream, fuse } => {
            let bytes = std::fs::read(&stream).with_context(|| format!("reading {}", stream.display()))?;
            let session = client.open_session(&SessionRequest { ckpt: abs(&ckpt)? }).await?;
            let result = async {
                let d = client.send_packets(session.id, bytes).await?;
                for f in &d.decoded {
                    println!("device {} t={} {} {} bits", f.device_id, f.timestamp, f.mode, f.bits);
                }
                if fuse {
                    let g = client.fuse(session.id).await?;
                    println!("occupied cells: {} of {}", g.occupied, g.grid * g.grid);
                    for row in g.probabilities.chunks(g.grid) {
                        let line: Vec<String> = row.iter().map(|p| format!("{p:.2}")).collect();
                        println!("{}", line.join(" "));
                    }
                }
                Ok::<_, tocom_client::ClientError>(())
            }
            .await;
            client.close_session(session.id).await?;
            result?;
        }
    }
    Ok(())
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.server.is_empty() {
        bail!("--server must not be empty");
    }
    run(cli).await
}
