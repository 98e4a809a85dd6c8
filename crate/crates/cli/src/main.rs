use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use branchflow::builder::{build_one_sided, build_symmetric, BuildSpec, Side, TraceConvention};
use branchflow::energy::total_energy;
use branchflow::field::{
    evaluate_f, grid_divergence, rasterize_tube, required_dims, tube_radius, FieldGrid, GLParams, Tube,
};
use branchflow::lab::{self, interpolation_constant};
use branchflow::measure::{detect_loops, validate, PolygonalMeasure};
use branchflow::optimizer::{optimize, optimize_with_restarts, OptimizeOptions};
use branchflow::profile::{make_vr, wall_energy, wall_tail_moment};
use branchflow::quantize::quantize;
use branchflow::rectdisk::{map_check, RectDiskParams};
use branchflow::{Error, K_STAR};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

const VERSION: &str = env!("BRANCHFLOW_VERSION");

#[derive(Parser, Debug, Serialize)]
#[command(name = "branchflow", version = VERSION, about = "Branched flux trees: construction, energy, optimization and flux-tube fields")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum SideArg {
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum TraceArg {
    Refined,
    Base,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Build the dyadic branching construction.
    Build {
        #[arg(long, default_value_t = 1.0)]
        phi: f64,
        #[arg(long, default_value_t = 1.0)]
        l: f64,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Grid size at the midplane; defaults to the optimal N.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Build only one half of the box.
        #[arg(long, value_enum)]
        one_sided: Option<SideArg>,
        #[arg(long, value_enum, default_value = "refined")]
        trace: TraceArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the energy of a tree.
    Energy {
        #[arg(long = "in")]
        input: PathBuf,
        /// Include the per-segment breakdown in JSON output.
        #[arg(long)]
        per_segment: bool,
    },
    /// Locally minimize the energy over free node positions and heights.
    Optimize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long, default_value_t = 0)]
        restarts: usize,
        #[arg(long)]
        symmetrize: bool,
        #[arg(long)]
        freeze_heights: bool,
        /// Write the iteration trace as CSV.
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Round fluxes to multiples of 2 pi / k.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check admissibility and absence of loops.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Rasterize a straight flux tube on a staggered grid.
    Rasterize {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        phi: f64,
        /// Horizontal velocity of the tube center, as dx,dy.
        #[arg(long, value_parser = parse_pair, default_value = "0,0")]
        slope: [f64; 2],
        #[arg(long, default_value_t = 10.0)]
        r: f64,
        /// Height of the slab.
        #[arg(long, default_value_t = 1.0)]
        dz: f64,
        /// Side of the periodic box; defaults to 2.2 (r0 + R eta).
        #[arg(long)]
        l: Option<f64>,
        /// Grid dimensions nx,ny,nz; defaults to the minimum resolving eta.
        #[arg(long, value_parser = parse_triple)]
        dims: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the interior energy of a field file.
    FieldEnergy {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
    },
    /// Energy of the truncated wall profile v_R.
    Profile {
        #[arg(long)]
        r: f64,
        /// Print the sampled profile as CSV.
        #[arg(long)]
        emit_csv: bool,
    },
    /// Statistics of the rectangle-to-disk map.
    MapCheck {
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        #[arg(long, default_value_t = 1.0)]
        h: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Energy of the construction over a sweep of T and its log-log slope.
    Scaling {
        #[arg(long, default_value_t = 1.0)]
        phi: f64,
        #[arg(long, default_value_t = 1.0)]
        l: f64,
        #[arg(long, default_value_t = 1e-3)]
        tmin: f64,
        #[arg(long, default_value_t = 1e-1)]
        tmax: f64,
        #[arg(long, default_value_t = 7)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        /// Also record locally optimized energies.
        #[arg(long)]
        optimize: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random check of the interpolation inequality.
    CheckInterpolation {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        atoms_max: usize,
        #[arg(long, default_value_t = 64)]
        grid_m: usize,
        /// Allowed shortfall below (2 pi)^(-1/3).
        #[arg(long, default_value_t = 0.02)]
        slack: f64,
    },
    /// Random check of the partial-sum bound for decreasing sequences.
    CheckLemsqrt {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Random check of the Hoelder bound between slices.
    CheckHolder {
        #[arg(long, default_value_t = 20)]
        constructed: usize,
        #[arg(long, default_value_t = 20)]
        optimized: usize,
        #[arg(long, default_value_t = 50)]
        pairs: usize,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    <[f64; 2]>::try_from(v).map_err(|_| format!("expected two comma-separated numbers, got {s:?}"))
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> =
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated integers, got {s:?}"))
}

/// What a command produced: a JSON document and its text rendering.
struct Report {
    value: Value,
    text: String,
    /// A check ran but did not hold.
    failed: bool,
    /// Primary output for stdout; the summary then goes to stderr.
    document: Option<String>,
}

impl Report {
    fn ok(value: Value, text: String) -> Self {
        Report { value, text, failed: false, document: None }
    }

    /// Writes `tree` to `out`, or makes it the primary output.
    fn with_tree(mut self, tree: String, out: &Option<PathBuf>) -> branchflow::Result<Self> {
        match out {
            Some(p) => fs::write(p, tree)?,
            None => self.document = Some(tree),
        }
        Ok(self)
    }
}

fn meta(cli: &Cli) -> Value {
    json!({ "version": VERSION, "seed": cli.seed, "params": &cli.command })
}

fn csv_header(cli: &Cli) -> Vec<String> {
    vec![format!("version={VERSION}"), format!("seed={}", cli.seed), format!("params={}", json!(&cli.command))]
}

fn read_tree(path: &Path) -> branchflow::Result<PolygonalMeasure> {
    PolygonalMeasure::read(path)
}

/// Tree JSON with the reproducibility header under `meta`.
fn tree_document(m: &PolygonalMeasure, cli: &Cli) -> String {
    let mut doc: Value = serde_json::from_str(&m.to_json()).expect("tree JSON is valid");
    doc["meta"] = meta(cli);
    serde_json::to_string_pretty(&doc).expect("serializable")
}

fn run(cli: &Cli) -> branchflow::Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    match &cli.command {
        Cmd::Build { phi, l, t, n, depth, one_sided, trace, out } => {
            let mut spec = BuildSpec::uniform(*phi, *l, *t, *n, *depth);
            spec.trace = match trace {
                TraceArg::Refined => TraceConvention::Refined,
                TraceArg::Base => TraceConvention::Base,
            };
            let b = match one_sided {
                None => build_symmetric(&spec)?,
                Some(SideArg::Top) => build_one_sided(&spec, Side::Top)?,
                Some(SideArg::Bottom) => build_one_sided(&spec, Side::Bottom)?,
            };
            let e = total_energy(&b.measure)?.total;
            let value = json!({ "meta": meta(cli), "N": b.n, "depth": b.depth, "trace_n": b.trace_n, "energy": e,
                "nodes": b.measure.nodes.len(), "segments": b.measure.segments.len(), "tail_energy_bound": b.tail_energy_bound });
            let text = format!(
                "N={} depth={} nodes={} segments={} energy={e:.9}",
                b.n,
                b.depth,
                b.measure.nodes.len(),
                b.measure.segments.len()
            );
            Report::ok(value, text).with_tree(tree_document(&b.measure, cli), out)
        }
        Cmd::Energy { input, per_segment } => {
            let e = total_energy(&read_tree(input)?)?;
            let mut value =
                json!({ "meta": meta(cli), "total": e.total, "perimeter": e.perimeter, "transport": e.transport });
            if *per_segment {
                value["per_segment"] = json!(e.per_segment);
            }
            Ok(Report::ok(
                value,
                format!("total={:.9} perimeter={:.9} transport={:.9}", e.total, e.perimeter, e.transport),
            ))
        }
        Cmd::Optimize { input, out, max_iters, restarts, symmetrize, freeze_heights, trace_csv } => {
            let m = read_tree(input)?;
            let opts = OptimizeOptions {
                max_iters: *max_iters,
                symmetrize: *symmetrize,
                freeze_heights: *freeze_heights,
                seed: cli.seed,
                ..OptimizeOptions::default()
            };
            let before = total_energy(&m)?.total;
            let r = if *restarts > 0 { optimize_with_restarts(&m, &opts, *restarts)? } else { optimize(&m, &opts)? };
            if let Some(p) = trace_csv {
                let header: String = csv_header(cli).iter().map(|h| format!("# {h}\n")).collect();
                fs::write(p, header + &r.trace_csv())?;
            }
            let value = json!({ "meta": meta(cli), "initial_energy": before, "energy": r.energy(),
                "iterations": r.trace.len().saturating_sub(1), "status": format!("{:?}", r.status) });
            let text = format!(
                "energy {before:.9} -> {:.9} ({:?}, {} iterations)",
                r.energy(),
                r.status,
                r.trace.len().saturating_sub(1)
            );
            Report::ok(value, text).with_tree(tree_document(&r.measure, cli), out)
        }
        Cmd::Quantize { input, k, out } => {
            let m = read_tree(input)?;
            let q = quantize(&m, *k)?;
            let before = total_energy(&m)?.total;
            let after = total_energy(&q.measure)?.total;
            let value = json!({ "meta": meta(cli), "quantum": q.quantum, "quanta": q.quanta, "energy_before": before, "energy_after": after });
            let text = format!("quantum={:.9} segments={} energy {before:.9} -> {after:.9}", q.quantum, q.quanta.len());
            Report::ok(value, text).with_tree(tree_document(&q.measure, cli), out)
        }
        Cmd::Validate { input } => {
            let m = read_tree(input)?;
            let report = validate(&m);
            let loops = detect_loops(&m);
            let ok = report.is_empty() && loops.is_empty();
            let value = json!({ "meta": meta(cli), "valid": ok, "violations": report.violations, "loops": loops });
            let text = if ok {
                "valid".to_owned()
            } else {
                let mut t = format!("invalid: {report}");
                if !loops.is_empty() {
                    t.push_str(&format!("; {} loop(s) through segments {:?}", loops.len(), loops));
                }
                t
            };
            Ok(Report { value, text, failed: !ok, document: None })
        }
        Cmd::Rasterize { alpha, beta, phi, slope, r, dz, l, dims, out } => {
            let gl = GLParams::new(*alpha, *beta, 1.0)?;
            let tube = Tube { phi: *phi, start: [0.0, 0.0], slope: *slope, z: [0.0, *dz] };
            let l = l.unwrap_or_else(|| 2.2 * (tube_radius(&gl, *phi) + r * gl.eta()));
            let dims = dims.unwrap_or_else(|| required_dims(&gl, &tube, l));
            let g = rasterize_tube(&gl, &tube, *r, l, dims)?;
            g.write_to(std::io::BufWriter::new(fs::File::create(out)?))?;
            let div = grid_divergence(&g);
            let value = json!({ "meta": meta(cli), "dims": g.dims, "L": l, "eta": gl.eta(), "max_divergence": div, "slice_flux": g.slice_flux(0) });
            Ok(Report::ok(value, format!("dims={:?} L={l:.6} eta={:.6} max_divergence={div:e}", g.dims, gl.eta())))
        }
        Cmd::FieldEnergy { input, alpha, beta } => {
            let g = FieldGrid::read_from(std::io::BufReader::new(fs::File::open(input)?))?;
            let gl = GLParams::new(*alpha, *beta, 1.0)?;
            let f = evaluate_f(&g, &gl, g.z);
            let value = json!({ "meta": meta(cli), "energy": f, "max_divergence": grid_divergence(&g) });
            let text = serde_json::to_string_pretty(&f).expect("serializable");
            Ok(Report::ok(value, text))
        }
        Cmd::Profile { r, emit_csv } => {
            let p = make_vr(*r)?;
            let k = wall_energy(&p);
            let tail = wall_tail_moment(&p);
            let value = json!({ "meta": meta(cli), "R": r, "K_R": k, "K_star": K_STAR, "excess": k - K_STAR, "tail_moment": tail });
            let mut text = format!("R={r} K_R={k:.9} K*={K_STAR:.9} excess={:.3e} tail_moment={tail:.6}", k - K_STAR);
            if *emit_csv {
                let header: String = csv_header(cli).iter().map(|h| format!("# {h}\n")).collect();
                text = header + &p.to_csv();
            }
            Ok(Report::ok(value, text))
        }
        Cmd::MapCheck { w, h, samples } => {
            let p = RectDiskParams::new([0.0, 0.0], *w, *h, 0.0, 1.0)?;
            let c = map_check(&p, *samples, &mut rng)?;
            let header: String = csv_header(cli).iter().map(|h| format!("# {h}\n")).collect();
            let text = format!(
                "{header}samples,max_det_error,max_fd_error,max_roundtrip_error,max_boundary_error,max_plane_lipschitz,max_height_lipschitz\n{},{:e},{:e},{:e},{:e},{:.6},{:.6}",
                c.samples, c.max_det_error, c.max_fd_error, c.max_roundtrip_error, c.max_boundary_error, c.max_plane_lipschitz, c.max_height_lipschitz
            );
            let failed = c.max_det_error > 1e-10
                || c.max_fd_error > 1e-6
                || c.max_roundtrip_error > 1e-8
                || c.max_boundary_error > 1e-9;
            Ok(Report { value: json!({ "meta": meta(cli), "check": c }), text, failed, document: None })
        }
        Cmd::Scaling { phi, l, tmin, tmax, points, depth, optimize, out } => {
            let ts = lab::log_sweep(*tmin, *tmax, *points)?;
            let opts = OptimizeOptions { seed: cli.seed, ..OptimizeOptions::default() };
            let run = lab::run_scaling(*phi, *l, &ts, *depth, optimize.then_some(&opts))?;
            let csv = run.to_csv(&csv_header(cli));
            let mut text = format!("slope={:.6} intercept={:.6}", run.slope, run.intercept);
            if run.regime_warning {
                text.push_str("\nwarning: some T has N < 2, outside the T^(1/3) regime");
            }
            let mut report = Report::ok(json!({ "meta": meta(cli), "run": run }), text);
            match out {
                Some(p) => fs::write(p, csv)?,
                None if !cli.json => report.document = Some(csv),
                None => {}
            }
            Ok(report)
        }
        Cmd::CheckInterpolation { trials, atoms_max, grid_m, slack } => {
            let r = lab::run_interpolation_check(*trials, *atoms_max, *grid_m, cli.seed)?;
            let threshold = interpolation_constant() - slack;
            let failed = r.min_product < threshold;
            let text = format!(
                "min_product={:.6} threshold={threshold:.6} (trial {}) {}",
                r.min_product,
                r.argmin_trial,
                if failed { "FAIL" } else { "ok" }
            );
            Ok(Report {
                value: json!({ "meta": meta(cli), "report": r, "threshold": threshold, "pass": !failed }),
                text,
                failed,
                document: None,
            })
        }
        Cmd::CheckLemsqrt { trials } => {
            let r = lab::lemsqrt_check(*trials, cli.seed);
            let failed = r.violations > 0;
            let text = format!(
                "inequalities={} violations={} min_relative_margin={:.6}",
                r.inequalities, r.violations, r.min_relative_margin
            );
            Ok(Report {
                value: json!({ "meta": meta(cli), "report": r, "pass": !failed }),
                text,
                failed,
                document: None,
            })
        }
        Cmd::CheckHolder { constructed, optimized, pairs } => {
            let r = lab::run_holder_check(*constructed, *optimized, *pairs, cli.seed)?;
            let failed = r.violations > 0;
            let text = format!("checks={} violations={} min_margin={:.6e}", r.checks, r.violations, r.min_margin);
            Ok(Report {
                value: json!({ "meta": meta(cli), "report": r, "pass": !failed }),
                text,
                failed,
                document: None,
            })
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Invalid(_) => "invalid",
        Error::Structural(_) => "structural",
        Error::UnsupportedTopology(_) => "unsupported_topology",
        Error::Underdetermined(_) => "underdetermined",
        Error::Precondition(_) => "precondition",
        Error::QuantizationUnderflow { .. } => "quantization_underflow",
        Error::Resolution { .. } => "resolution",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = lab::worker_pool().and_then(|pool| pool.install(|| run(&cli)));
    match result {
        Ok(report) => {
            let summary =
                if cli.json { serde_json::to_string_pretty(&report.value).expect("serializable") } else { report.text };
            let mut stdout = std::io::stdout().lock();
            // a closed pipe (`| head`) is not an error worth reporting
            let _ = match report.document {
                Some(doc) => {
                    eprintln!("{summary}");
                    writeln!(stdout, "{}", doc.trim_end())
                }
                None => writeln!(stdout, "{summary}"),
            };
            if report.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            if cli.json {
                eprintln!("{}", json!({ "error": error_kind(&e), "message": e.to_string() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(1)
        }
    }
}
