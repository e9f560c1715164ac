use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dmot::formats::{self, PipelineConfig};
use dmot::{overlay, synth};
use dmot_core::metrics::{self, Similarity};

#[derive(Parser)]
#[command(name = "dmot", about = "Direct monocular 3D multi-object tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SimilarityArg {
    Iou2d,
    Iou3d,
    Giou3d,
}

#[derive(Subcommand)]
enum Command {
    /// Track all objects in a sequence directory.
    Track {
        sequence_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predicted tracks against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        similarity: SimilarityArg,
        /// Also report MOTA/MOTP/IDSW/FP/FN.
        #[arg(long)]
        clearmot: bool,
    },
    /// Generate a synthetic sequence from a scenario spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project tracked 3D boxes into the sequence images.
    RenderOverlay {
        sequence_dir: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Track {
            sequence_dir,
            config,
            out,
        } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            fs::create_dir_all(&out)?;
            let rows = dmot::run_sequence(&sequence_dir, cfg)?;
            let path = out.join("tracks.txt");
            formats::write_kitti_tracks(&path, &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Eval {
            gt,
            pred,
            similarity,
            clearmot,
        } => {
            let gt_data = formats::read_kitti_tracks(&gt, "seq")?;
            let pred_data = formats::read_kitti_tracks(&pred, "seq")?;
            let kernel = match similarity {
                SimilarityArg::Iou2d => Similarity::Iou2d,
                SimilarityArg::Iou3d => Similarity::Iou3d,
                SimilarityArg::Giou3d => Similarity::Giou3dNormalized,
            };
            let alphas = metrics::default_alphas();
            let report =
                metrics::hota(&gt_data, &pred_data, kernel, &alphas).map_err(|e| anyhow!("{e}"))?;
            println!("HOTA evaluation");
            println!(
                "  HOTA  {:.6}   DetA {:.6}   AssA {:.6}",
                report.hota, report.det_a, report.ass_a
            );
            println!("  DetRe {:.6}   DetPr {:.6}", report.det_re, report.det_pr);
            println!(
                "  AssRe {:.6}   AssPr {:.6}   LocA {:.6}",
                report.ass_re, report.ass_pr, report.loc_a
            );
            println!("hota={:.6}", report.hota);
            println!("det_a={:.6}", report.det_a);
            println!("ass_a={:.6}", report.ass_a);
            println!("det_re={:.6}", report.det_re);
            println!("det_pr={:.6}", report.det_pr);
            println!("ass_re={:.6}", report.ass_re);
            println!("ass_pr={:.6}", report.ass_pr);
            println!("loc_a={:.6}", report.loc_a);
            if clearmot {
                let cm = metrics::clearmot(&gt_data, &pred_data, kernel, 0.5)
                    .map_err(|e| anyhow!("{e}"))?;
                println!("CLEARMOT (threshold 0.5)");
                println!(
                    "  MOTA {:.6}   MOTP {:.6}   IDSW {}   FP {}   FN {}",
                    cm.mota, cm.motp, cm.id_switches, cm.false_positives, cm.false_negatives
                );
                println!("mota={:.6}", cm.mota);
                println!("motp={:.6}", cm.motp);
                println!("idsw={}", cm.id_switches);
                println!("fp={}", cm.false_positives);
                println!("fn={}", cm.false_negatives);
            }
        }
        Command::Synth { spec, out } => {
            let text =
                fs::read_to_string(&spec).with_context(|| format!("open {}", spec.display()))?;
            let spec = synth::SynthSpec::parse(&text)?;
            synth::write_sequence(&spec, &out)?;
            println!("wrote {} frames to {}", spec.frames, out.display());
        }
        Command::RenderOverlay {
            sequence_dir,
            tracks,
            out,
        } => {
            let bundle = formats::load_sequence(&sequence_dir)?;
            let data = formats::read_kitti_tracks(&tracks, &bundle.sequence_id)?;
            fs::create_dir_all(&out)?;
            for rec in &bundle.frames {
                let image = formats::load_image(&rec.image_path)?;
                let rows: Vec<formats::TrackOutput> = data
                    .frames
                    .get(&rec.frame_id)
                    .map(|objs| {
                        objs.iter()
                            .filter_map(|o| {
                                let b3 = o.box3d.as_ref()?;
                                Some(formats::TrackOutput {
                                    frame: rec.frame_id,
                                    id: o.id.max(0) as u32,
                                    box2d: o
                                        .box2d
                                        .unwrap_or(metrics::Box2D::new(0.0, 0.0, 0.0, 0.0)),
                                    center: b3.center,
                                    yaw: b3.yaw,
                                    dims: b3.dims,
                                    score: o.confidence.unwrap_or(1.0),
                                })
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                let img = overlay::draw_boxes(&image, &rows, &bundle.intrinsics);
                formats::save_rgb_image(&out.join(format!("{:06}.png", rec.frame_id)), &img)?;
            }
            println!(
                "wrote {} overlays to {}",
                bundle.frames.len(),
                out.display()
            );
        }
    }
    Ok(())
}
