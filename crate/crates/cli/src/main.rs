use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dcepk::io::{self, Container, ContainerError, ExportExtras};
use dcepk::metrics::{ccc_slices, psnr, ssim};
use dcepk::phantom::{add_kspace_noise, make_phantom, PhantomSpec};
use dcepk::recon::InitPolicy;
use dcepk::{
    fit_patlak_lls, golden_angle_mask, image_forward, spgr_inverse, undersample, zero_fill_recon,
    Dims3, MaskSpec, NonPhysicalPolicy, ParameterScaling, PkError, ReconOptions, SeriesKind,
    Volume,
};

mod config;

#[derive(Parser, Debug)]
#[command(
    name = "dcepk",
    version,
    about = "DCE-MRI Patlak pipelines on synthetic data"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom: pk, vif, ctx and roi containers in an output directory
    Phantom {
        #[arg(long, value_delimiter = ',', default_value = "32,32,8")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 21)]
        nt: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// frame spacing in seconds
        #[arg(long, default_value_t = 73.0)]
        temporal_resolution: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Golden-angle undersampling mask
    Mask {
        /// k-space plane size nkx,nky
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 21)]
        nt: usize,
        #[arg(long, default_value_t = 10.0)]
        accel: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PK maps to images, or to undersampled k-space when a mask is given
    Forward {
        #[arg(long)]
        pk: PathBuf,
        #[arg(long)]
        vif: PathBuf,
        #[arg(long)]
        ctx: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode an image series with a mask and add k-space noise
    Undersample {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// complex noise std relative to the frame-0 DC magnitude
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-filled adjoint reconstruction
    Zerofill {
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form Patlak fit of a concentration series, or of an image
    /// series converted to concentration when --ctx is given
    Fit {
        #[arg(long)]
        conc: PathBuf,
        #[arg(long)]
        vif: PathBuf,
        #[arg(long)]
        ctx: Option<PathBuf>,
        /// fail on signals the SPGR model cannot produce instead of zeroing them
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direct PK reconstruction from k-space
    ReconDirect {
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        vif: PathBuf,
        #[arg(long)]
        ctx: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum)]
        init: Option<Init>,
        #[arg(long, value_enum)]
        scaling: Option<Scaling>,
        #[arg(long)]
        out: PathBuf,
        /// iteration log, one JSON record per line
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compare two containers with CCC, SSIM and PSNR
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "ccc,ssim,psnr")]
        which: Vec<Metric>,
        /// volume container; nonzero voxels are scored
        #[arg(long)]
        roi: Option<PathBuf>,
        /// parameter scored when the inputs are PK maps
        #[arg(long, value_enum, default_value_t = Param::Ktrans)]
        param: Param,
        /// defaults to max - min of the reference
        #[arg(long)]
        data_range: Option<f64>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Cut S_u and residual PK maps into training blocks
    ExportBlocks {
        #[arg(long)]
        su: PathBuf,
        #[arg(long)]
        theta_u: PathBuf,
        #[arg(long)]
        theta_t: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "52,52,33")]
        block: Vec<usize>,
        #[arg(long)]
        s_full: Option<PathBuf>,
        #[arg(long)]
        vif: Option<PathBuf>,
        #[arg(long)]
        ctx: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    Zeros,
    PatlakOfCorrupted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scaling {
    Identity,
    PatlakGram,
    VoxelGaussNewton,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Metric {
    Ccc,
    Ssim,
    Psnr,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Param {
    Ktrans,
    Vp,
}

fn dims3(v: &[usize], what: &str) -> Result<Dims3> {
    match v {
        [x, y, z] => Ok(Dims3::new(*x, *y, *z)),
        _ => bail!("{what} needs three comma-separated sizes, got {v:?}"),
    }
}

fn save(path: &Path, c: &Container) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    io::save(path, c).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<Container> {
    io::load(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom {
            dims,
            nt,
            seed,
            temporal_resolution,
            out,
        } => {
            let spec = PhantomSpec {
                dims: dims3(&dims, "--dims")?,
                nt,
                seed,
                temporal_resolution,
                ..Default::default()
            };
            let ph = make_phantom::<f64>(&spec)?;
            let prov = serde_json::to_value(&spec)?;
            fs::create_dir_all(&out)?;
            let tag = |c: Container| c.with_provenance(Some(seed), Some(prov.clone()));
            save(&out.join("pk.pkc"), &tag(io::pk_to_container(&ph.pk)))?;
            save(&out.join("vif.pkc"), &tag(io::vif_to_container(&ph.vif)))?;
            save(&out.join("ctx.pkc"), &tag(io::ctx_to_container(&ph.ctx)))?;
            let roi = Volume::from_vec(
                spec.dims,
                ph.support.iter().map(|&b| b as u8 as f64).collect(),
            )?;
            save(
                &out.join("roi.pkc"),
                &tag(io::volume_to_container("roi", &roi, "binary")),
            )?;
            println!(
                "phantom {:?} x {nt} frames written to {}",
                spec.dims.as_array(),
                out.display()
            );
        }
        Command::Mask {
            dims,
            nt,
            accel,
            seed,
            out,
        } => {
            let [nkx, nky] = dims[..] else {
                bail!("--dims needs nkx,nky, got {dims:?}")
            };
            let spec = MaskSpec {
                nkx,
                nky,
                nt,
                accel,
                seed,
            };
            let mask = golden_angle_mask(&spec)?;
            let acc = dcepk::acceleration_of(&mask)?;
            save(
                &out,
                &io::mask_to_container(&mask)
                    .with_provenance(Some(seed), Some(serde_json::to_value(&spec)?)),
            )?;
            println!(
                "mask {nkx}x{nky}x{nt}: overall acceleration {:.3}",
                acc.overall
            );
        }
        Command::Forward {
            pk,
            vif,
            ctx,
            mask,
            out,
        } => {
            let pk = io::pk_from_container::<f64>(&load(&pk)?)?;
            let vif = io::vif_from_container::<f64>(&load(&vif)?)?;
            let ctx = io::ctx_from_container::<f64>(&load(&ctx)?)?;
            let s = image_forward(&pk, &vif, &ctx)?;
            match mask {
                Some(m) => {
                    let mask = io::mask_from_container(&load(&m)?)?;
                    save(&out, &io::kspace_to_container(&undersample(&s, &mask)?))?;
                }
                None => save(&out, &io::series_to_container(&s))?,
            }
        }
        Command::Undersample {
            image,
            mask,
            noise_sigma,
            seed,
            out,
        } => {
            let s = io::series_from_container::<f64>(&load(&image)?)?;
            let mask = io::mask_from_container(&load(&mask)?)?;
            let mut k = undersample(&s, &mask)?;
            if noise_sigma > 0.0 {
                k = add_kspace_noise(&k, noise_sigma, seed)?;
            } else if noise_sigma < 0.0 {
                bail!("--noise-sigma must be non-negative");
            }
            save(
                &out,
                &io::kspace_to_container(&k).with_provenance(Some(seed), None),
            )?;
        }
        Command::Zerofill { kspace, out } => {
            let k = io::kspace_from_container::<f64>(&load(&kspace)?, None)?;
            save(&out, &io::series_to_container(&zero_fill_recon(&k)?))?;
        }
        Command::Fit {
            conc,
            vif,
            ctx,
            strict,
            out,
        } => {
            let mut c = io::series_from_container::<f64>(&load(&conc)?)?;
            if c.kind() == SeriesKind::Image {
                let Some(ctx) = ctx else {
                    bail!(
                        "{} is an image series; pass --ctx to convert it",
                        conc.display()
                    )
                };
                let ctx = io::ctx_from_container::<f64>(&load(&ctx)?)?;
                let policy = if strict {
                    NonPhysicalPolicy::Strict
                } else {
                    NonPhysicalPolicy::ZeroAndCount
                };
                let inv = spgr_inverse(&c, &ctx, policy)?;
                if inv.nonphysical > 0 {
                    eprintln!(
                        "warning: {} voxel-frames outside the signal model were set to zero",
                        inv.nonphysical
                    );
                }
                c = inv.concentration;
            }
            let vif = io::vif_from_container::<f64>(&load(&vif)?)?;
            let pk = fit_patlak_lls(&c, &vif, c.frame_times())?;
            save(&out, &io::pk_to_container(&pk))?;
        }
        Command::ReconDirect {
            kspace,
            mask,
            vif,
            ctx,
            max_iters,
            tol,
            init,
            scaling,
            out,
            log,
        } => {
            let mask = io::mask_from_container(&load(&mask)?)?;
            let k = io::kspace_from_container::<f64>(&load(&kspace)?, Some(&mask))?;
            let vif = io::vif_from_container::<f64>(&load(&vif)?)?;
            let ctx = io::ctx_from_container::<f64>(&load(&ctx)?)?;
            let mut opts = ReconOptions::default();
            if let Some(n) = max_iters {
                opts.max_iters = n;
            }
            if let Some(t) = tol {
                opts.tol = t;
            }
            if let Some(i) = init {
                opts.init = match i {
                    Init::Zeros => InitPolicy::Zeros,
                    Init::PatlakOfCorrupted => InitPolicy::PatlakOfCorrupted,
                };
            }
            if let Some(s) = scaling {
                opts.scaling = match s {
                    Scaling::Identity => ParameterScaling::Identity,
                    Scaling::PatlakGram => ParameterScaling::PatlakGram,
                    Scaling::VoxelGaussNewton => ParameterScaling::VoxelGaussNewton,
                };
            }
            let (pk, iterations) = dcepk::reconstruct_direct(&k, &mask, &vif, &ctx, &opts)?;
            save(&out, &io::pk_to_container(&pk))?;
            if let Some(path) = log {
                fs::write(&path, iterations.to_jsonl())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let obj = iterations.objectives();
            println!(
                "{} iterations, stop {:?}, objective {:.6e} -> {:.6e}",
                obj.len() - 1,
                iterations.stop,
                obj[0],
                obj[obj.len() - 1]
            );
        }
        Command::Metrics {
            reference,
            test,
            which,
            roi,
            param,
            data_range,
            json_out,
        } => {
            let (a, b) = (
                scored_values(&load(&reference)?, param)?,
                scored_values(&load(&test)?, param)?,
            );
            if a.dims != b.dims {
                bail!(
                    "reference {:?} and test {:?} differ in shape",
                    a.dims,
                    b.dims
                );
            }
            let roi_mask = match roi {
                Some(p) => {
                    let v = io::volume_from_container::<f64>(&load(&p)?)?;
                    if v.as_slice().len() != a.values.len() / a.frames {
                        bail!("roi does not match the scored volume");
                    }
                    Some(
                        v.as_slice()
                            .repeat(a.frames)
                            .iter()
                            .map(|&x| x != 0.0)
                            .collect::<Vec<bool>>(),
                    )
                }
                None => None,
            };
            let selected = |v: &[f64]| -> Vec<f64> {
                match &roi_mask {
                    Some(m) => v
                        .iter()
                        .zip(m)
                        .filter(|(_, &k)| k)
                        .map(|(&x, _)| x)
                        .collect(),
                    None => v.to_vec(),
                }
            };
            let roi_voxels = roi_mask
                .as_ref()
                .map_or(a.values.len(), |m| m.iter().filter(|&&k| k).count());
            let range = match data_range {
                Some(r) => r,
                None => {
                    let r = selected(&a.values);
                    r.iter().cloned().fold(f64::MIN, f64::max)
                        - r.iter().cloned().fold(f64::MAX, f64::min)
                }
            };
            let mut results = Vec::new();
            for m in which {
                let (name, value, voxels) = match m {
                    Metric::Ccc => (
                        "ccc",
                        ccc_slices(&a.values, &b.values, roi_mask.as_deref())?,
                        roi_voxels,
                    ),
                    Metric::Psnr => (
                        "psnr",
                        psnr(&selected(&a.values), &selected(&b.values), range)?,
                        roi_voxels,
                    ),
                    Metric::Ssim => {
                        // slice-wise over the full grid; the roi does not apply
                        let mut acc = 0.0;
                        let n = a.values.len() / a.frames;
                        for f in 0..a.frames {
                            let va =
                                Volume::from_vec(a.dims, a.values[f * n..(f + 1) * n].to_vec())?;
                            let vb =
                                Volume::from_vec(a.dims, b.values[f * n..(f + 1) * n].to_vec())?;
                            acc += ssim(&va, &vb, range)?;
                        }
                        ("ssim", acc / a.frames as f64, a.values.len())
                    }
                };
                results.push(json!({"metric": name, "value": value, "roi_voxels": voxels}));
            }
            let text = serde_json::to_string_pretty(&results)?;
            println!("{text}");
            if let Some(p) = json_out {
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::ExportBlocks {
            su,
            theta_u,
            theta_t,
            block,
            s_full,
            vif,
            ctx,
            out_dir,
        } => {
            let su = io::series_from_container::<f64>(&load(&su)?)?;
            let tu = io::pk_from_container::<f64>(&load(&theta_u)?)?;
            let tt = io::pk_from_container::<f64>(&load(&theta_t)?)?;
            let s_full = s_full
                .map(|p| Ok::<_, anyhow::Error>(io::series_from_container::<f64>(&load(&p)?)?))
                .transpose()?;
            let vif = vif
                .map(|p| Ok::<_, anyhow::Error>(io::vif_from_container::<f64>(&load(&p)?)?))
                .transpose()?;
            let ctx = ctx
                .map(|p| Ok::<_, anyhow::Error>(io::ctx_from_container::<f64>(&load(&p)?)?))
                .transpose()?;
            let extras = ExportExtras {
                s_full: s_full.as_ref(),
                vif: vif.as_ref(),
                ctx: ctx.as_ref(),
            };
            let m = io::export_training_blocks(
                &su,
                &tu,
                &tt,
                dims3(&block, "--block")?,
                &out_dir,
                extras,
            )?;
            println!(
                "{} blocks (grid {:?}) written to {}",
                m.blocks.len(),
                m.grid,
                out_dir.display()
            );
        }
    }
    Ok(())
}

/// Flattened values of a PK map (one parameter), a volume or a series.
struct Scored {
    dims: Dims3,
    frames: usize,
    values: Vec<f64>,
}

fn scored_values(c: &Container, param: Param) -> Result<Scored> {
    match c.header.name.as_str() {
        "pk" => {
            let pk = io::pk_from_container::<f64>(c)?;
            let v = match param {
                Param::Ktrans => pk.ktrans(),
                Param::Vp => pk.vp(),
            };
            Ok(Scored {
                dims: pk.dims(),
                frames: 1,
                values: v.as_slice().to_vec(),
            })
        }
        "image" | "concentration" => {
            let s = io::series_from_container::<f64>(c)?;
            Ok(Scored {
                dims: s.dims(),
                frames: s.nt(),
                values: s.into_vec(),
            })
        }
        _ => {
            let v = io::volume_from_container::<f64>(c)?;
            Ok(Scored {
                dims: v.dims(),
                frames: 1,
                values: v.into_vec(),
            })
        }
    }
}

/// Exit status: container errors use their own codes (10-17), model errors 3,
/// anything else 1. Usage errors exit 2 via clap.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ContainerError>() {
            return e.code() as u8;
        }
        if cause.downcast_ref::<PkError>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
