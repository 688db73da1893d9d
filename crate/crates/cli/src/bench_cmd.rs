use std::path::{Path, PathBuf};

use fusecast_core::bench::report::{write_report, LatencyReport, Report, ReportFormat, REFERENCE_RESPONSE_MS};
use fusecast_core::bench::response::{parse_script, select_script};
use fusecast_core::bench::{run_fused_bench, run_naive_bench, run_response_bench, BenchParams};
use fusecast_core::transport::LinkParams;

use crate::args::Mode;
use crate::{BenchArgs, EXIT_CONFIG};

struct Row {
    mode: Mode,
    n: usize,
    report: LatencyReport,
    reference: bool,
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Fused => "fused",
        Mode::Naive => "naive",
        Mode::Response => "response",
    }
}

fn out_path(base: &Path, mode: Mode, n: usize, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{}-n{n}.{ext}", mode_name(mode)),
        None => format!("{stem}-{}-n{n}", mode_name(mode)),
    };
    base.with_file_name(name)
}

fn params(a: &BenchArgs, n: usize, link: Option<LinkParams>) -> BenchParams {
    let mut p = BenchParams::new(n, a.duration);
    p.warmup = a.warmup;
    p.canvas = a.canvas;
    p.source_size = a.source_size;
    p.source_fps = a.source_fps;
    p.tick_rate = a.tick;
    p.link = link;
    p
}

pub fn bench(a: BenchArgs) -> u8 {
    let mut modes = a.mode.clone();
    modes.sort();
    modes.dedup();
    let mut counts = a.channels.clone();
    counts.dedup();
    if counts.is_empty() || counts.iter().any(|&n| n == 0 || n > 256) {
        eprintln!("error: channel counts must be in 1..=256");
        return EXIT_CONFIG;
    }
    if !(a.tick > 0.0 && a.source_fps > 0.0) {
        eprintln!("error: rates must be positive");
        return EXIT_CONFIG;
    }
    let probe = params(&a, 1, None);
    let link_for = |mode: Mode| -> Option<LinkParams> {
        let bw = match (a.bandwidth, mode) {
            (Some(bw), _) => bw,
            (None, Mode::Naive) => 2.0 * probe.stream_demand(),
            (None, _) => return None,
        };
        Some(LinkParams::with_frame_burst(bw, probe.canvas_frame_bytes(), a.base_delay.as_micros() as u64))
    };
    let runs = modes.iter().filter(|m| **m != Mode::Response).count() * counts.len() + usize::from(modes.contains(&Mode::Response));
    let many = runs > 1;

    let mut rows: Vec<Row> = Vec::new();
    for &mode in modes.iter().filter(|m| **m != Mode::Response) {
        let link = link_for(mode);
        if let Some(l) = link {
            println!(
                "{} link: {:.2} MB/s, base delay {} us, {:.1}x one stream's demand",
                mode_name(mode),
                l.bandwidth_bytes_per_s / 1e6,
                l.base_delay_us,
                l.bandwidth_bytes_per_s / probe.stream_demand()
            );
        }
        let mut ns = counts.clone();
        let reference = !ns.contains(&1);
        if reference {
            ns.insert(0, 1);
        }
        for n in ns {
            let p = params(&a, n, link);
            let result = match mode {
                Mode::Fused => run_fused_bench(&p),
                _ => run_naive_bench(&p),
            };
            let report = match result {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            };
            let is_ref = reference && n == 1;
            if let (Some(base), false) = (&a.out, is_ref) {
                let path = out_path(base, mode, n, many);
                if let Err(e) = write_report(&Report::Latency(report.clone()), &path, ReportFormat::from_path(&path)) {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            }
            rows.push(Row { mode, n, report, reference: is_ref });
        }
    }
    if !rows.is_empty() {
        print_latency_table(&rows);
    }

    if modes.contains(&Mode::Response) {
        let n = counts[0];
        let script = match &a.script {
            Some(s) => match parse_script(s) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            },
            None => select_script(n, a.count),
        };
        // A custom script is replayed until `count` commands have been sent.
        let reps = if a.script.is_some() && !script.is_empty() { a.count.div_ceil(script.len()) } else { 1 };
        let report = match run_response_bench(&params(&a, n, None), &script, reps) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        };
        println!("{:<20} {:>7} {:>10} {:>10} {:>10}", "kind", "count", "mean ms", "p95 ms", "max ms");
        for (kind, s) in report.per_kind().into_iter().chain([("overall".to_string(), report.overall())]) {
            println!("{kind:<20} {:>7} {:>10.2} {:>10.2} {:>10.2}", s.count, s.mean / 1e3, s.p95 / 1e3, s.max / 1e3);
        }
        println!("timeouts: {}, rejected: {}", report.timeouts, report.rejected);
        println!("reference: about {REFERENCE_RESPONSE_MS:.0} ms mean at deployment scale (camera hardware and campus network)");
        if let Some(base) = &a.out {
            let path = out_path(base, Mode::Response, n, many);
            if let Err(e) = write_report(&Report::Response(report), &path, ReportFormat::from_path(&path)) {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    0
}

fn print_latency_table(rows: &[Row]) {
    println!(
        "{:<7} {:>4} {:>10} {:>10} {:>10} {:>10} {:>12} {:>8}",
        "mode", "n", "mean ms", "p50 ms", "p99 ms", "spread ms", "L(n)/L(1)", "frames"
    );
    for r in rows {
        let s = r.report.latency_summary();
        let l1 = rows
            .iter()
            .find(|o| o.mode == r.mode && o.n == 1)
            .map(|o| o.report.mean_latency_us())
            .unwrap_or(f64::NAN);
        println!(
            "{:<7} {:>4} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>12.3} {:>8}{}",
            mode_name(r.mode),
            r.n,
            s.mean / 1e3,
            s.p50 / 1e3,
            s.p99 / 1e3,
            r.report.max_spread_us() as f64 / 1e3,
            s.mean / l1,
            r.report.frames_received,
            if r.reference { "  (reference)" } else { "" }
        );
    }
    let fused: Vec<&Row> = rows.iter().filter(|r| r.mode == Mode::Fused).collect();
    let naive: Vec<&Row> = rows.iter().filter(|r| r.mode == Mode::Naive).collect();
    for f in &fused {
        if let Some(nv) = naive.iter().find(|nv| nv.n == f.n) {
            println!(
                "n={}: fused {:.2} ms vs naive {:.2} ms",
                f.n,
                f.report.mean_latency_us() / 1e3,
                nv.report.mean_latency_us() / 1e3
            );
        }
    }
}
