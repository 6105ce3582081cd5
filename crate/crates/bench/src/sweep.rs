use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cli::{Pattern, SweepArgs};
use crate::config::{Family, Knobs, RunConfig, Shape, ShapeDefaults};
use crate::measure::{measure, Failure};
use crate::report::{Summary, SweepRow};

/// Expands the grid into cells, grouped so every pattern of a family runs
/// back to back at the same coordinates.
pub fn cells(args: &SweepArgs) -> Result<Vec<RunConfig>, String> {
    let defaults = ShapeDefaults::for_preset(args.common.preset);
    let knobs = Knobs::from_args(&args.common)?;
    let patterns: Vec<Pattern> = if !args.patterns.is_empty() {
        args.patterns.clone()
    } else if let Some(f) = defaults.family {
        f.patterns().to_vec()
    } else {
        return Err("--patterns is required without a preset".into());
    };
    if let Some(f) = defaults.family {
        if let Some(p) = patterns.iter().find(|&&p| Family::of(p) != f) {
            return Err(format!("pattern {} does not belong to the {f:?} preset family", p.name()));
        }
    }
    let or = |v: &[usize], d: &[usize]| if v.is_empty() { d.to_vec() } else { v.to_vec() };
    let world_sizes = or(&args.world_sizes, &[defaults.world_size]);

    let mut shapes: Vec<Shape> = Vec::new();
    if patterns.iter().any(|p| p.is_ag()) {
        for &m in &or(&args.m, &defaults.ms) {
            for &n in &or(&args.n, &[defaults.n]) {
                for &k in &or(&args.k, &[defaults.k]) {
                    shapes.push(Shape::Ag { m, n, k });
                }
            }
        }
    }
    if patterns.iter().any(|p| !p.is_ag()) {
        for &heads in &or(&args.heads, &[defaults.heads]) {
            for &head_dim in &or(&args.head_dims, &[defaults.head_dim]) {
                for &kv_len in &or(&args.kv_lens, &defaults.kv_lens) {
                    shapes.push(Shape::Fd {
                        heads,
                        head_dim,
                        kv_len,
                    });
                }
            }
        }
    }

    let mut out = Vec::new();
    for &w in &world_sizes {
        for &shape in &shapes {
            for &p in patterns.iter().filter(|&&p| Family::of(p) == shape.family()) {
                out.push(RunConfig {
                    pattern: Some(p),
                    world_size: w,
                    shape,
                    knobs: knobs.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Runs one cell, never failing: problems end up in the row.
fn run_cell(index: usize, cfg: &RunConfig) -> SweepRow {
    let pattern = cfg.pattern.expect("sweep cells always carry a pattern");
    let mut row = SweepRow::new(index, cfg, pattern);
    if let Err(e) = cfg.validate() {
        row.status = "invalid";
        row.error = Some(e);
        return row;
    }
    match measure(cfg, pattern, |_| Ok(())) {
        Ok(samples) => row.fill(&Summary::new(cfg, pattern, &samples)),
        Err(f) => {
            row.status = match f {
                Failure::Setup(_) => "invalid",
                Failure::Deadlock(_) => "deadlock",
                Failure::Runtime(_) => "failed",
            };
            row.error = Some(f.message().to_string());
        }
    }
    row
}

type Coords = (usize, [Option<usize>; 6], [usize; 3]);

fn coords(r: &SweepRow) -> Coords {
    (
        r.world_size,
        [r.m, r.n, r.k, r.heads, r.head_dim, r.kv_len],
        [r.bm, r.bn, r.bk],
    )
}

fn pattern_of(name: &str) -> Pattern {
    Pattern::AG
        .iter()
        .chain(&Pattern::FD)
        .copied()
        .find(|p| p.name() == name)
        .expect("rows are built from known patterns")
}

/// Fills `speedup` as baseline median over variant median at equal
/// coordinates.
pub fn attach_speedups(rows: &mut [SweepRow]) {
    let baselines: BTreeMap<(Coords, &'static str), f64> = rows
        .iter()
        .filter_map(|r| r.median_us.map(|m| ((coords(r), r.pattern), m)))
        .collect();
    for r in rows.iter_mut() {
        let base = pattern_of(r.pattern).baseline().name();
        r.speedup = match (baselines.get(&(coords(r), base)), r.median_us) {
            (Some(&b), Some(v)) if v > 0.0 => Some(b / v),
            _ => None,
        };
    }
}

/// Gnuplot data: one indexed block per (pattern, fixed coordinates), x being
/// M for All-Gather + GEMM and kv_len for flash decode.
pub fn gnuplot_dat(rows: &[SweepRow]) -> String {
    let mut groups: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in rows {
        let (x, label) = match (r.m, r.kv_len) {
            (Some(m), _) => (
                m,
                format!("{} W={} N={} K={}", r.pattern, r.world_size, r.n.unwrap_or(0), r.k.unwrap_or(0)),
            ),
            (None, Some(kv)) => (
                kv,
                format!(
                    "{} W={} H={} d={}",
                    r.pattern,
                    r.world_size,
                    r.heads.unwrap_or(0),
                    r.head_dim.unwrap_or(0)
                ),
            ),
            (None, None) => continue,
        };
        groups.entry(label).or_default().push((
            x,
            r.median_us.unwrap_or(f64::NAN),
            r.speedup.unwrap_or(f64::NAN),
        ));
    }
    let mut out = String::from("# columns: x (M or kv_len), median_us, speedup over baseline\n");
    for (i, (label, mut pts)) in groups.into_iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        pts.sort_by_key(|p| p.0);
        let _ = writeln!(out, "# index {i}: {label}");
        for (x, med, sp) in pts {
            let _ = writeln!(out, "{x} {med} {sp}");
        }
    }
    out
}

pub fn default_dat_path(out: &Path) -> PathBuf {
    out.with_extension("dat")
}

/// Runs every cell, writes the CSV and the gnuplot file, and returns the
/// rows. Progress goes to stderr.
pub fn run_sweep(args: &SweepArgs, cells: &[RunConfig]) -> Result<Vec<SweepRow>, String> {
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cfg) in cells.iter().enumerate() {
        let row = run_cell(i, cfg);
        eprintln!(
            "[{}/{}] {} W={} -> {}{}",
            i + 1,
            cells.len(),
            row.pattern,
            row.world_size,
            row.status,
            row.median_us.map(|m| format!(" median {m:.1}us")).unwrap_or_default()
        );
        rows.push(row);
    }
    attach_speedups(&mut rows);

    let mut w = csv::Writer::from_path(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    let dat = args.dat.clone().unwrap_or_else(|| default_dat_path(&args.out));
    std::fs::write(&dat, gnuplot_dat(&rows)).map_err(|e| format!("{}: {e}", dat.display()))?;
    Ok(rows)
}
