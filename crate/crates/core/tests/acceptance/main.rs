//! Runs every acceptance criterion at its stated tolerance and prints one
//! line per criterion. Exits nonzero if any gating criterion fails.
//!
//! Set `SONAR_KD_QUALITATIVE=1` to also run the non-gating five-seed
//! video false-alarm comparison (about ten student trainings).

#[path = "../common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{ap_oracle, functions, gradsuite, kd_oracle, scenarios};
use sonar_kd::dataaug::{build_dataset, synth_sonar, DEFAULT_SIGMA};

struct Line {
    id: u32,
    pass: bool,
    gating: bool,
    text: String,
}

fn criterion(id: u32, f: impl FnOnce() -> Result<String, String>) -> Line {
    let started = Instant::now();
    let (pass, text) = match f() {
        Ok(t) => (true, t),
        Err(t) => (false, t),
    };
    let line = Line {
        id,
        pass,
        gating: true,
        text: format!("{text} [{:.1}s]", started.elapsed().as_secs_f64()),
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let status = match (l.gating, l.pass) {
        (false, _) => "INFO",
        (true, true) => "PASS",
        (true, false) => "FAIL",
    };
    println!("criterion {:>2} {status}: {}", l.id, l.text);
}

fn gradients() -> Result<String, String> {
    let started = Instant::now();
    let mut checks = gradsuite::op_checks().map_err(|e| e.to_string())?;
    let ops = checks.len();
    checks.extend(gradsuite::model_checks().map_err(|e| e.to_string())?);
    let elapsed = started.elapsed();
    let scalars: usize = checks.iter().map(|c| c.report.checked).sum();
    let worst = checks
        .iter()
        .max_by(|a, b| a.report.max_rel_error_all.total_cmp(&b.report.max_rel_error_all))
        .unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.name.as_str()).collect();
    let summary = format!(
        "{ops} ops + {} model checks, {scalars} partials, eps 1e-4; largest rel err {:.2e} ({}) over elements with |grad| >= 1e-5",
        checks.len() - ops,
        worst.report.max_rel_error_all,
        worst.name
    );
    if !failed.is_empty() || worst.report.max_rel_error_all >= 1e-4 {
        return Err(format!("{summary}; failing: {failed:?}"));
    }
    if elapsed >= Duration::from_secs(60) {
        return Err(format!("{summary}; took {elapsed:?} (limit 60 s)"));
    }
    Ok(summary)
}

fn function_properties() -> Result<String, String> {
    let results = functions::run_all();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    let summary = format!("{} properties x {} cases, tol 1e-9", results.len(), functions::CASES);
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failed.join("; ")))
    }
}

fn kd_aggregation() -> Result<String, String> {
    let dev = kd_oracle::max_oracle_deviation(50, 11);
    let [bbox, cls, obj] = kd_oracle::self_distill_residuals(50, 12);
    let summary = format!(
        "B=2 C=2 grids 4x4/2x2/1x1, both normalizations: max |crate - loops| {dev:.1e}; S=T: MSE {bbox:.1e}, KL {cls:.1e}, BCE - entropy floor {obj:.1e}"
    );
    if dev <= kd_oracle::TOL && bbox <= kd_oracle::TOL && cls <= kd_oracle::TOL && obj <= kd_oracle::TOL {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn soft_minimality() -> Result<String, String> {
    let m = kd_oracle::soft_minimality(100, 100, 13);
    let summary = format!(
        "{} comparisons (100 teachers x 100 perturbations), {} violations; L_soft(T,T) - floor <= {:.1e}",
        m.comparisons, m.violations, m.max_self_excess
    );
    if m.comparisons == 10_000 && m.violations == 0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn ap_exhaustive() -> Result<String, String> {
    let started = Instant::now();
    let out = ap_oracle::run(20_000, 5);
    let elapsed = started.elapsed();
    let summary = format!(
        "{} instances (all <=4 preds x <=3 GT over a 6-box 16x16 pool + 20000 random 2-class), {} mismatches",
        out.instances, out.mismatches
    );
    if out.mismatches > 0 {
        return Err(format!("{summary}; first: {}", out.first_mismatch.unwrap()));
    }
    if elapsed >= Duration::from_secs(120) {
        return Err(format!("{summary}; took {elapsed:?} (limit 2 min)"));
    }
    Ok(summary)
}

fn table_precision() -> Result<String, String> {
    let bad = scenarios::pr_mismatches(&scenarios::BOX_TABLE);
    let kd_bad = scenarios::pr_mismatches(&scenarios::KD_TABLE);
    let kd_note = kd_bad
        .iter()
        .map(|(n, got, pr)| format!("{n}: TP/FP give {got:.2}, printed {pr:.2}"))
        .collect::<Vec<_>>()
        .join("; ");
    let summary = format!(
        "box table {}/{} rows within 0.01 pp (the table has {} rows, not 8); distillation table {}/{} ({kd_note})",
        scenarios::BOX_TABLE.len() - bad.len(),
        scenarios::BOX_TABLE.len(),
        scenarios::BOX_TABLE.len(),
        scenarios::KD_TABLE.len() - kd_bad.len(),
        scenarios::KD_TABLE.len(),
    );
    if bad.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; box table mismatches {bad:?}"))
    }
}

fn shapes() -> Result<String, String> {
    let full = scenarios::shape_contract(640, 4)?;
    let desk = scenarios::shape_contract(64, 8)?;
    Ok(format!("640 -> {full:?}, 64 -> {desk:?}; ViT tokens (H/32)^2 = 400 / 4 with P=1"))
}

fn augmentation() -> Result<String, String> {
    let dev = scenarios::noise_std_deviation(DEFAULT_SIGMA, 1_000_000, 3);
    let all = build_dataset(&synth_sonar(9, 100).map_err(|e| e.to_string())?, DEFAULT_SIGMA, 9, true)
        .map_err(|e| e.to_string())?;
    scenarios::hflip_involution(&all)?;
    let counts = scenarios::check_split(&all, 100)?;
    let summary = format!(
        "hflip twice = identity on {} samples; noise std off by {:.3}% over 1e6 draws; 100 groups split {counts:?}, no leakage",
        all.len(),
        100.0 * dev
    );
    if dev < 0.01 && counts == [70, 15, 15] {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn offline_kd() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = scenarios::offline_kd(&scenarios::PipelineConfig::desk(), dir.path());
    let decrease = out.student.decrease(10).unwrap_or(f64::NAN);
    let summary = format!(
        "{} images ({} train); teacher train AP50 {:.3}; {} records, {} round-trip mismatches; student loss {:.3} -> {:.3} (last-10 mean), decrease {:.1}%; student train AP50 {:.3}; total {:.0}s",
        out.images,
        out.train_images,
        out.teacher_train_ap50,
        out.records,
        out.round_trip_mismatches,
        out.student.first_total().unwrap_or(f64::NAN),
        out.student.tail_total(10).unwrap_or(f64::NAN),
        100.0 * decrease,
        out.student_train_ap50,
        out.elapsed.as_secs_f64()
    );
    let ok = out.images == 200
        && out.teacher_train_ap50 >= 0.9
        && out.records == out.train_images
        && out.round_trip_mismatches == 0
        && decrease >= 0.9
        && out.elapsed < Duration::from_secs(15 * 60);
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn qualitative() -> Line {
    let text = if std::env::var("SONAR_KD_QUALITATIVE").is_ok_and(|v| v == "1") {
        let dir = tempfile::tempdir().unwrap();
        let rows = scenarios::kd_video_fp_by_seed(&scenarios::PipelineConfig::desk(), &[1, 2, 3, 4, 5], dir.path());
        let wins = rows.iter().filter(|(_, kd, plain)| kd <= plain).count();
        let detail: Vec<String> = rows
            .iter()
            .map(|(s, kd, plain)| format!("seed {s}: {kd:.1} vs {plain:.1}"))
            .collect();
        format!(
            "results are not reproducible on synthetic data, not gating; KD video FP <= plain in {wins}/5 seeds ({})",
            detail.join(", ")
        )
    } else {
        "results are not reproducible on synthetic data, not gating; seed comparison skipped (SONAR_KD_QUALITATIVE=1 runs it)".to_string()
    };
    Line {
        id: 10,
        pass: true,
        gating: false,
        text,
    }
}

fn main() -> ExitCode {
    let lines = vec![
        criterion(1, gradients),
        criterion(2, function_properties),
        criterion(3, kd_aggregation),
        criterion(4, soft_minimality),
        criterion(5, ap_exhaustive),
        criterion(6, table_precision),
        criterion(7, shapes),
        criterion(8, augmentation),
        criterion(9, offline_kd),
        {
            let l = qualitative();
            print_line(&l);
            l
        },
    ];
    let failed: Vec<u32> = lines.iter().filter(|l| l.gating && !l.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all gating criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
