//! Evaluation report files: a schema version, one row per instance, and an
//! aggregate block, with stable key ordering so identical runs produce
//! byte-identical files.
//!
//! Wall-clock timings are run-dependent, so they are excluded from the
//! report and written to a separate `.timing` sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use refpose_core::synth::{InstanceMetrics, MetricsReport};

use super::IoError;

/// Serialize the deterministic part of a report.
pub fn write_report(path: &Path, report: &MetricsReport) -> Result<(), IoError> {
    let mut s = String::new();
    s.push_str("# report v1\n");
    let _ = writeln!(s, "instances {}", report.instances.len());
    s.push_str("columns index seed add add_s diameter success failed iter_adds correspondences\n");
    for inst in &report.instances {
        let iter_adds = join_floats(&inst.iteration_adds);
        let corr = inst
            .correspondences
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            s,
            "instance {} {} {} {} {} {} {} {} {}",
            inst.index,
            inst.seed,
            inst.add,
            inst.add_s,
            inst.diameter,
            inst.success_01d as u8,
            inst.failed as u8,
            if iter_adds.is_empty() { "-".to_string() } else { iter_adds },
            if corr.is_empty() { "-".to_string() } else { corr },
        );
    }
    let _ = writeln!(s, "aggregate recall_add01d {}", report.recall_add01d);
    let _ = writeln!(s, "aggregate auc_add {}", report.auc_add);
    let _ = writeln!(s, "aggregate mean_add {}", report.mean_add);
    let _ = writeln!(s, "aggregate median_add {}", report.median_add);
    std::fs::write(path, &s).map_err(|e| IoError::io(path, e))
}

/// Write the run-dependent timing sidecar next to a report.
pub fn write_timing_sidecar(report_path: &Path, report: &MetricsReport) -> Result<PathBuf, IoError> {
    let mut name = report_path.file_name().unwrap_or_default().to_os_string();
    name.push(".timing");
    let path = report_path.with_file_name(name);
    let mut s = String::from("# timing sidecar v1 (non-deterministic)\n");
    for inst in &report.instances {
        let _ = writeln!(s, "instance {} wall_seconds {:.6}", inst.index, inst.wall_seconds);
    }
    std::fs::write(&path, &s).map_err(|e| IoError::io(&path, e))?;
    Ok(path)
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_float_list(path: &Path, line: usize, s: &str) -> Result<Vec<f64>, IoError> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| IoError::parse(path, line, "a number list", p))
        })
        .collect()
}

/// Parse a report file back into memory (timings come back as zero; they
/// live in the sidecar).
pub fn read_report(path: &Path) -> Result<MetricsReport, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut instances: Vec<InstanceMetrics> = Vec::new();
    let mut aggregates = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[0] {
            "instances" | "columns" => {}
            "instance" => {
                if parts.len() != 10 {
                    return Err(IoError::parse(path, line_no, "10 instance fields", line));
                }
                let fnum = |j: usize| -> Result<f64, IoError> {
                    parts[j]
                        .parse::<f64>()
                        .map_err(|_| IoError::parse(path, line_no, "a number", parts[j]))
                };
                instances.push(InstanceMetrics {
                    index: parts[1]
                        .parse()
                        .map_err(|_| IoError::parse(path, line_no, "an index", parts[1]))?,
                    seed: parts[2]
                        .parse()
                        .map_err(|_| IoError::parse(path, line_no, "a seed", parts[2]))?,
                    add: fnum(3)?,
                    add_s: fnum(4)?,
                    diameter: fnum(5)?,
                    success_01d: parts[6] == "1",
                    failed: parts[7] == "1",
                    iteration_adds: parse_float_list(path, line_no, parts[8])?,
                    correspondences: if parts[9] == "-" {
                        Vec::new()
                    } else {
                        parts[9]
                            .split(';')
                            .map(|p| {
                                p.parse::<usize>().map_err(|_| {
                                    IoError::parse(path, line_no, "a count list", p)
                                })
                            })
                            .collect::<Result<_, _>>()?
                    },
                    wall_seconds: 0.0,
                });
            }
            "aggregate" => {
                if parts.len() != 3 {
                    return Err(IoError::parse(path, line_no, "aggregate key value", line));
                }
                let v = parts[2]
                    .parse::<f64>()
                    .map_err(|_| IoError::parse(path, line_no, "a number", parts[2]))?;
                aggregates.insert(parts[1].to_string(), v);
            }
            other => {
                return Err(IoError::parse(path, line_no, "a report record", other));
            }
        }
    }
    let get = |k: &str| -> Result<f64, IoError> {
        aggregates
            .get(k)
            .copied()
            .ok_or_else(|| IoError::format(path, format!("missing aggregate `{k}`")))
    };
    Ok(MetricsReport {
        recall_add01d: get("recall_add01d")?,
        auc_add: get("auc_add")?,
        mean_add: get("mean_add")?,
        median_add: get("median_add")?,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("refpose-report-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_report() -> MetricsReport {
        let instances = vec![
            InstanceMetrics {
                index: 0,
                seed: 42,
                add: 0.00125,
                add_s: 0.001,
                diameter: 0.21,
                success_01d: true,
                iteration_adds: vec![0.005, 0.002, 0.00125],
                correspondences: vec![400, 450, 460],
                failed: false,
                wall_seconds: 0.5,
            },
        ];
        MetricsReport::from_instances(instances)
    }

    #[test]
    fn report_round_trip_preserves_values_bitwise() {
        let report = sample_report();
        let path = tmp("report.txt");
        write_report(&path, &report).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back.instances.len(), report.instances.len());
        for (a, b) in report.instances.iter().zip(&back.instances) {
            assert_eq!(a.add.to_bits(), b.add.to_bits());
            assert_eq!(a.add_s.to_bits(), b.add_s.to_bits());
            assert_eq!(a.diameter.to_bits(), b.diameter.to_bits());
            assert_eq!(a.iteration_adds, b.iteration_adds);
            assert_eq!(a.correspondences, b.correspondences);
        }
        assert_eq!(report.recall_add01d.to_bits(), back.recall_add01d.to_bits());
        assert_eq!(report.auc_add.to_bits(), back.auc_add.to_bits());

        // Writing the parsed report again reproduces the bytes.
        let path2 = tmp("report2.txt");
        write_report(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn timing_sidecar_is_separate() {
        let report = sample_report();
        let path = tmp("report3.txt");
        write_report(&path, &report).unwrap();
        let sidecar = write_timing_sidecar(&path, &report).unwrap();
        assert_ne!(sidecar, path);
        let text = std::fs::read_to_string(sidecar).unwrap();
        assert!(text.contains("wall_seconds"));
        let report_text = std::fs::read_to_string(&path).unwrap();
        assert!(!report_text.contains("wall"));
    }
}
